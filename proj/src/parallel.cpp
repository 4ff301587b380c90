#include "adn/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace adn {
namespace {

std::size_t hardware_threads() {
  unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : n;
}

std::size_t threads_from_env() {
  const char* env = std::getenv("ADN_THREADS");
  if (env == nullptr || *env == '\0') return hardware_threads();
  try {
    long v = std::stol(env);
    if (v <= 0) return hardware_threads();
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    return hardware_threads();
  }
}

std::atomic<std::size_t>& configured() {
  static std::atomic<std::size_t> n{threads_from_env()};
  return n;
}

thread_local bool in_parallel_region = false;

}  // namespace

std::size_t thread_count() { return configured().load(); }

void set_thread_count(std::size_t n) {
  configured().store(n == 0 ? hardware_threads() : n);
}

void reset_thread_count_from_env() { configured().store(threads_from_env()); }

void parallel_for(std::size_t n,
                  const std::function<void(std::size_t, std::size_t)>& body) {
  if (n == 0) return;
  std::size_t workers = std::min(thread_count(), n);
  if (workers <= 1 || in_parallel_region) {
    body(0, n);
    return;
  }

  std::exception_ptr error;
  std::mutex error_mutex;
  auto run = [&](std::size_t begin, std::size_t end) {
    in_parallel_region = true;
    try {
      body(begin, end);
    } catch (...) {
      std::lock_guard<std::mutex> lock(error_mutex);
      if (!error) error = std::current_exception();
    }
    in_parallel_region = false;
  };

  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  std::size_t chunk = n / workers, extra = n % workers, begin = 0;
  for (std::size_t w = 0; w < workers; ++w) {
    std::size_t end = begin + chunk + (w < extra ? 1 : 0);
    if (w + 1 == workers) {
      run(begin, end);
    } else {
      pool.emplace_back(run, begin, end);
    }
    begin = end;
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace adn
