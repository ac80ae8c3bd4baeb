#pragma once

#include <atomic>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <queue>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace tristream {

// Error taxonomy shared across modules. The CLI maps these onto exit codes.
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};
struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};
struct IndexError : std::runtime_error {
  explicit IndexError(const std::string& msg) : std::runtime_error(msg) {}
};
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};
struct DivergenceError : std::runtime_error {
  explicit DivergenceError(const std::string& msg) : std::runtime_error(msg) {}
};

inline uint64_t fnv1a64(const std::string& s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline uint64_t mix64(uint64_t x) {
  // splitmix64 finalizer
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Deterministic RNG. mt19937_64 is bit-specified by the standard, and all
// derived draws below avoid std distributions (whose outputs are
// implementation defined), so streams reproduce across platforms and builds.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : gen_(seed), seed_of_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // uniform in [0,1)
  double uniform() {
    return static_cast<double>(gen_() >> 11) * (1.0 / 9007199254740992.0);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  uint64_t uniform_int(uint64_t n) {
    if (n == 0) throw ContractError("uniform_int: n must be positive");
    // rejection sampling to kill modulo bias
    uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t v;
    do {
      v = gen_();
    } while (v >= limit);
    return v % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  // standard normal via Box-Muller (cached second value)
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1, u2;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Named sub-stream; all module-level randomness hangs off one root seed.
  Rng derive(const std::string& name) const {
    return Rng(mix64(seed_of_ ^ fnv1a64(name)));
  }
  Rng derive(const std::string& name, uint64_t index) const {
    return Rng(mix64(mix64(seed_of_ ^ fnv1a64(name)) + index));
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = uniform_int(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
  uint64_t seed_of_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Small fixed-size worker pool used for per-clip work (flow precompute,
// stream assembly). Tasks write to disjoint output slots, so results do not
// depend on scheduling.
class ThreadPool {
 public:
  explicit ThreadPool(int num_threads) {
    num_threads = std::max(1, num_threads);
    for (int i = 0; i < num_threads; ++i) {
      workers_.emplace_back([this] { worker_loop(); });
    }
  }
  ~ThreadPool() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      done_ = true;
    }
    cv_.notify_all();
    for (auto& t : workers_) t.join();
  }

  ThreadPool(const ThreadPool&) = delete;
  ThreadPool& operator=(const ThreadPool&) = delete;

  // Runs fn(i) for i in [0, n), blocking until all complete.
  void parallel_for(int64_t n, const std::function<void(int64_t)>& fn) {
    if (n <= 0) return;
    if (workers_.size() <= 1) {
      for (int64_t i = 0; i < n; ++i) fn(i);
      return;
    }
    std::atomic<int64_t> next{0};
    std::atomic<int64_t> finished{0};
    std::mutex done_mu;
    std::condition_variable done_cv;
    int jobs = static_cast<int>(workers_.size());
    {
      std::lock_guard<std::mutex> lk(mu_);
      for (int j = 0; j < jobs; ++j) {
        tasks_.push([&, n] {
          int64_t i;
          while ((i = next.fetch_add(1)) < n) fn(i);
          {
            std::lock_guard<std::mutex> lk2(done_mu);
            finished.fetch_add(1);
          }
          done_cv.notify_one();
        });
      }
    }
    cv_.notify_all();
    std::unique_lock<std::mutex> lk(done_mu);
    done_cv.wait(lk, [&] { return finished.load() == jobs; });
  }

  int size() const { return static_cast<int>(workers_.size()); }

 private:
  void worker_loop() {
    for (;;) {
      std::function<void()> task;
      {
        std::unique_lock<std::mutex> lk(mu_);
        cv_.wait(lk, [this] { return done_ || !tasks_.empty(); });
        if (done_ && tasks_.empty()) return;
        task = std::move(tasks_.front());
        tasks_.pop();
      }
      task();
    }
  }

  std::vector<std::thread> workers_;
  std::queue<std::function<void()>> tasks_;
  std::mutex mu_;
  std::condition_variable cv_;
  bool done_ = false;
};

}  // namespace tristream
