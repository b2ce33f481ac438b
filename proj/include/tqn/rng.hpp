#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace tqn {

// Purpose tags for keyed streams. Each purpose draws from its own stream so
// consuming randomness for one thing never shifts another.
enum class StreamTag : std::uint64_t {
  init = 1,
  data = 2,
  shuffle = 3,
  window = 4,
  dropout = 5,
  templates = 6,
  probe = 7,
};

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // Stream determined by (seed, key...) alone; counters in the key (epoch,
  // step, slot) make any position of a run reproducible without replaying it.
  static Rng stream(std::uint64_t seed, std::initializer_list<std::uint64_t> key) {
    return keyed(seed, std::vector<std::uint64_t>(key));
  }

  static Rng stream(std::uint64_t seed, StreamTag tag, std::initializer_list<std::uint64_t> key = {}) {
    std::vector<std::uint64_t> full{static_cast<std::uint64_t>(tag)};
    full.insert(full.end(), key.begin(), key.end());
    return keyed(seed, full);
  }

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  // Uniform integer in [0, n).
  std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_); }
  // Uniform integer in [lo, hi].
  std::size_t between(std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(engine_);
  }
  bool bernoulli(double p) { return uniform() < p; }

  std::mt19937_64& engine() { return engine_; }

  std::string state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }
  void set_state(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
  }

 private:
  static Rng keyed(std::uint64_t seed, const std::vector<std::uint64_t>& key) {
    std::vector<std::uint32_t> words;
    words.reserve(2 * (key.size() + 1));
    auto push = [&](std::uint64_t v) {
      words.push_back(static_cast<std::uint32_t>(v));
      words.push_back(static_cast<std::uint32_t>(v >> 32));
    };
    push(seed);
    for (auto k : key) push(k);
    std::seed_seq seq(words.begin(), words.end());
    Rng rng(0);
    rng.engine_.seed(seq);
    return rng;
  }

  std::mt19937_64 engine_;
};

}  // namespace tqn
