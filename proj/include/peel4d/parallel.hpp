#pragma once

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstddef>
#include <cstdlib>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <type_traits>
#include <vector>

namespace peel4d {

// Worker count from PEEL4D_THREADS, else hardware concurrency.
inline unsigned configured_threads() {
  if (const char* env = std::getenv("PEEL4D_THREADS")) {
    try {
      const int n = std::stoi(env);
      if (n > 0) return static_cast<unsigned>(n);
    } catch (...) {
    }
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

// Fixed-size pool running index-range jobs. Dispatch does not allocate, so
// steady-state render loops stay allocation free. Work items are claimed
// dynamically, but callers always partition into a fixed number of chunks
// whose results are merged in chunk order, so output never depends on the
// thread count.
class ThreadPool {
 public:
  explicit ThreadPool(unsigned threads = configured_threads()) {
    const unsigned extra = threads > 1 ? threads - 1 : 0;
    workers_.reserve(extra);
    for (unsigned i = 0; i < extra; ++i) workers_.emplace_back([this] { worker_loop(); });
  }

  ThreadPool(const ThreadPool&) = delete;
  ThreadPool& operator=(const ThreadPool&) = delete;

  ~ThreadPool() {
    {
      std::lock_guard lock(mutex_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& w : workers_) w.join();
  }

  unsigned size() const { return static_cast<unsigned>(workers_.size()) + 1; }

  // Calls fn(i) for i in [0, n). Blocks until all calls finish.
  template <class Fn>
  void run(std::size_t n, Fn&& fn) {
    if (n == 0) return;
    if (workers_.empty() || n == 1) {
      for (std::size_t i = 0; i < n; ++i) fn(i);
      return;
    }
    std::lock_guard serial(dispatch_mutex_);
    {
      std::lock_guard lock(mutex_);
      job_ = const_cast<void*>(static_cast<const void*>(std::addressof(fn)));
      thunk_ = [](void* f, std::size_t i) { (*static_cast<std::remove_reference_t<Fn>*>(f))(i); };
      total_ = n;
      next_.store(0);
      pending_ = n;
      ++generation_;
    }
    cv_.notify_all();
    drain(&fn, thunk_, n);
    std::unique_lock lock(mutex_);
    done_cv_.wait(lock, [this] { return pending_ == 0 && active_ == 0; });
    job_ = nullptr;
  }

  static ThreadPool& global() {
    static ThreadPool pool;
    return pool;
  }

 private:
  void drain(void* job, void (*thunk)(void*, std::size_t), std::size_t total) {
    std::size_t finished = 0;
    for (;;) {
      const std::size_t i = next_.fetch_add(1);
      if (i >= total) break;
      thunk(job, i);
      ++finished;
    }
    if (finished > 0) {
      std::lock_guard lock(mutex_);
      pending_ -= finished;
      if (pending_ == 0) done_cv_.notify_all();
    }
  }

  void worker_loop() {
    std::size_t seen = 0;
    for (;;) {
      void* job = nullptr;
      void (*thunk)(void*, std::size_t) = nullptr;
      std::size_t total = 0;
      {
        std::unique_lock lock(mutex_);
        cv_.wait(lock, [&] { return stop_ || (generation_ != seen && job_ != nullptr); });
        if (stop_) return;
        seen = generation_;
        job = job_;
        thunk = thunk_;
        total = total_;
        ++active_;
      }
      drain(job, thunk, total);
      std::lock_guard lock(mutex_);
      if (--active_ == 0 && pending_ == 0) done_cv_.notify_all();
    }
  }

  std::vector<std::thread> workers_;
  std::mutex mutex_;
  std::mutex dispatch_mutex_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  void* job_ = nullptr;
  void (*thunk_)(void*, std::size_t) = nullptr;
  std::size_t total_ = 0;
  std::atomic<std::size_t> next_{0};
  std::size_t pending_ = 0;
  std::size_t active_ = 0;
  std::size_t generation_ = 0;
  bool stop_ = false;
};

// Splits [0, n) into `chunks` contiguous ranges; fn(chunk, begin, end).
template <class Fn>
void parallel_chunks(std::size_t n, std::size_t chunks, Fn&& fn, ThreadPool& pool = ThreadPool::global()) {
  if (n == 0) return;
  chunks = std::max<std::size_t>(1, std::min(chunks, n));
  pool.run(chunks, [&](std::size_t c) {
    const std::size_t begin = n * c / chunks;
    const std::size_t end = n * (c + 1) / chunks;
    fn(c, begin, end);
  });
}

}  // namespace peel4d
