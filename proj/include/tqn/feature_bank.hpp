#pragma once

// Per-sequence cache of clip features. Each iteration a contiguous window
// of clips is re-encoded online (carrying gradient) and spliced into the
// cached features; after the optimizer step the online rows are written
// back.

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "tqn/encoder.hpp"
#include "tqn/io.hpp"
#include "tqn/rng.hpp"
#include "tqn/synth.hpp"

namespace tqn {

class KeyError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

struct OnlineWindow {
  std::size_t sequence_id = 0;
  std::size_t start = 0;
  std::size_t length = 0;
};

// Uniform over valid starts; the whole sequence when n_online >= t_v.
inline OnlineWindow sample_online_window(std::size_t sequence_id, std::size_t clips, std::size_t n_online, Rng& rng) {
  if (clips < 1) throw ShapeError("sample_online_window: empty sequence");
  if (n_online < 1) throw ConfigError("sample_online_window: n_online must be >= 1");
  const std::size_t length = std::min(n_online, clips);
  const std::size_t start = length == clips ? 0 : rng.index(clips - length + 1);
  return {sequence_id, start, length};
}

struct BankEntry {
  std::size_t clips = 0;
  std::vector<double> features;      // clips x feature_dim
  std::vector<std::uint64_t> stamps;  // iteration of the last write, per clip
};

class FeatureBank {
 public:
  FeatureBank() = default;
  explicit FeatureBank(std::size_t feature_dim) : feature_dim_(feature_dim) {}

  std::size_t feature_dim() const { return feature_dim_; }
  std::size_t size() const { return entries_.size(); }
  const std::map<std::size_t, BankEntry>& entries() const { return entries_; }

  std::size_t total_rows() const {
    std::size_t n = 0;
    for (const auto& [_, e] : entries_) n += e.clips;
    return n;
  }

  void insert(std::size_t id, const Tensor& features, std::uint64_t iteration) {
    if (features.rank() != 2 || features.cols() != feature_dim_) throw ShapeError("bank: features must be t x d");
    BankEntry e;
    e.clips = features.rows();
    e.features.assign(features.values().begin(), features.values().end());
    e.stamps.assign(e.clips, iteration);
    entries_[id] = std::move(e);
  }

  const BankEntry& entry(std::size_t id) const {
    auto it = entries_.find(id);
    if (it == entries_.end()) throw KeyError("bank: unknown sequence id " + std::to_string(id));
    return it->second;
  }

  // Cached features of a whole sequence, as a constant.
  Tensor read(std::size_t id) const {
    const auto& e = entry(id);
    return Tensor({e.clips, feature_dim_}, e.features);
  }

  // Online rows inside the window, cached constants elsewhere.
  Tensor assemble(const OnlineWindow& w, const Tensor& online) const {
    const auto& e = entry(w.sequence_id);
    check_window(e, w, online);
    if (w.length == e.clips) return online;
    std::vector<Tensor> parts;
    auto cached = [&](std::size_t from, std::size_t to) {
      std::vector<double> rows(e.features.begin() + static_cast<std::ptrdiff_t>(from * feature_dim_),
                               e.features.begin() + static_cast<std::ptrdiff_t>(to * feature_dim_));
      return Tensor({to - from, feature_dim_}, std::move(rows));
    };
    if (w.start > 0) parts.push_back(cached(0, w.start));
    parts.push_back(online);
    if (w.start + w.length < e.clips) parts.push_back(cached(w.start + w.length, e.clips));
    return concat_rows(parts);
  }

  void commit(const OnlineWindow& w, const Tensor& online, std::uint64_t iteration) {
    auto it = entries_.find(w.sequence_id);
    if (it == entries_.end()) throw KeyError("bank: unknown sequence id " + std::to_string(w.sequence_id));
    auto& e = it->second;
    check_window(e, w, online);
    std::copy(online.values().begin(), online.values().end(),
              e.features.begin() + static_cast<std::ptrdiff_t>(w.start * feature_dim_));
    for (std::size_t c = w.start; c < w.start + w.length; ++c) e.stamps[c] = iteration;
  }

  bool operator==(const FeatureBank& o) const {
    if (feature_dim_ != o.feature_dim_ || entries_.size() != o.entries_.size()) return false;
    for (const auto& [id, e] : entries_) {
      auto it = o.entries_.find(id);
      if (it == o.entries_.end() || it->second.clips != e.clips || it->second.features != e.features ||
          it->second.stamps != e.stamps) {
        return false;
      }
    }
    return true;
  }

  void write_to(ContainerWriter& w, const std::string& prefix) const {
    std::vector<std::uint64_t> ids, clips, stamps;
    std::vector<double> rows;
    for (const auto& [id, e] : entries_) {
      ids.push_back(id);
      clips.push_back(e.clips);
      stamps.insert(stamps.end(), e.stamps.begin(), e.stamps.end());
      rows.insert(rows.end(), e.features.begin(), e.features.end());
    }
    w.meta()[prefix + "feature_dim"] = feature_dim_;
    w.add_u64(prefix + "ids", ids);
    w.add_u64(prefix + "clips", clips);
    w.add_u64(prefix + "stamps", stamps);
    w.add(prefix + "features", {rows.size()}, rows);
  }

  static FeatureBank read_from(const ContainerReader& r, const std::string& prefix) {
    FeatureBank b(r.meta().at(prefix + "feature_dim").get<std::size_t>());
    const auto ids = r.u64(prefix + "ids");
    const auto clips = r.u64(prefix + "clips");
    const auto stamps = r.u64(prefix + "stamps");
    const auto rows = r.f64(prefix + "features");
    if (ids.size() != clips.size()) throw IoError("bank: id and clip tables differ in length");
    std::size_t clip_offset = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      BankEntry e;
      e.clips = clips[i];
      if ((clip_offset + e.clips) * b.feature_dim_ > rows.size() || clip_offset + e.clips > stamps.size()) {
        throw IoError("bank: snapshot truncated");
      }
      e.features.assign(rows.begin() + static_cast<std::ptrdiff_t>(clip_offset * b.feature_dim_),
                        rows.begin() + static_cast<std::ptrdiff_t>((clip_offset + e.clips) * b.feature_dim_));
      e.stamps.assign(stamps.begin() + static_cast<std::ptrdiff_t>(clip_offset),
                      stamps.begin() + static_cast<std::ptrdiff_t>(clip_offset + e.clips));
      clip_offset += e.clips;
      b.entries_.emplace(ids[i], std::move(e));
    }
    return b;
  }

  void save(const std::filesystem::path& path) const {
    ContainerWriter w;
    w.meta()["kind"] = "bank";
    write_to(w, "");
    w.write(path);
  }

  static FeatureBank load(const std::filesystem::path& path) {
    const auto r = ContainerReader::load(path);
    if (r.meta().value("kind", "") != "bank") throw IoError(path.string() + ": not a bank snapshot");
    return read_from(r, "");
  }

 private:
  void check_window(const BankEntry& e, const OnlineWindow& w, const Tensor& online) const {
    if (w.length < 1 || w.start + w.length > e.clips) throw ShapeError("bank: window outside the sequence");
    if (online.rank() != 2 || online.rows() != w.length || online.cols() != feature_dim_) {
      throw ShapeError("bank: online features must be " + std::to_string(w.length) + " x " + std::to_string(feature_dim_));
    }
  }

  std::size_t feature_dim_ = 0;
  std::map<std::size_t, BankEntry> entries_;
};

// Encodes every training sequence once, in evaluation mode.
inline FeatureBank init_bank(const ToyEncoder& encoder, const SyntheticDataset& data, std::uint64_t iteration = 0) {
  if (data.train.empty()) throw DataError("init_bank: training split is empty");
  NoRecording guard;
  FeatureBank bank(encoder.config.feature_dim);
  for (const auto& s : data.train) bank.insert(s.id, encoder(data.frames(s)), iteration);
  return bank;
}

}  // namespace tqn
