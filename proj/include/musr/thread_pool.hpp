#pragma once

#include <condition_variable>
#include <cstddef>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace musr {

// Persistent worker pool for data-parallel kernels. Work is split into one
// contiguous chunk per worker, so every output element is written by exactly
// one thread and results are identical for any thread count.
class ThreadPool {
public:
    static ThreadPool& instance() {
        static ThreadPool pool;
        return pool;
    }

    void set_threads(std::size_t n) {
        if (n == 0) n = 1;
        if (n == threads_requested_) return;
        stop_workers();
        threads_requested_ = n;
        start_workers();
    }

    std::size_t threads() const { return threads_requested_; }

    // fn(begin, end) is invoked on disjoint subranges of [0, count).
    void parallel_for(std::size_t count, const std::function<void(std::size_t, std::size_t)>& fn) {
        const std::size_t nworkers = workers_.size() + 1;  // workers + caller
        if (count == 0) return;
        if (nworkers == 1 || count < 2) {
            fn(0, count);
            return;
        }
        const std::size_t nchunks = nworkers < count ? nworkers : count;
        const std::size_t base = count / nchunks;
        const std::size_t rem = count % nchunks;

        {
            std::unique_lock<std::mutex> lock(mutex_);
            job_fn_ = &fn;
            job_chunks_ = nchunks;
            job_base_ = base;
            job_rem_ = rem;
            next_chunk_ = 1;  // chunk 0 runs on the caller
            pending_ = nchunks - 1;
            ++generation_;
        }
        cv_work_.notify_all();

        fn(0, base + (0 < rem ? 1 : 0));

        std::unique_lock<std::mutex> lock(mutex_);
        cv_done_.wait(lock, [this] { return pending_ == 0; });
        job_fn_ = nullptr;
    }

    ~ThreadPool() { stop_workers(); }

    ThreadPool(const ThreadPool&) = delete;
    ThreadPool& operator=(const ThreadPool&) = delete;

private:
    ThreadPool() : threads_requested_(default_threads()) { start_workers(); }

    static std::size_t default_threads() {
        const unsigned hw = std::thread::hardware_concurrency();
        return hw == 0 ? 1 : hw;
    }

    static std::size_t chunk_begin(std::size_t idx, std::size_t base, std::size_t rem) {
        return idx * base + (idx < rem ? idx : rem);
    }

    void start_workers() {
        stopping_ = false;
        for (std::size_t w = 1; w < threads_requested_; ++w) {
            workers_.emplace_back([this] { worker_loop(); });
        }
    }

    void stop_workers() {
        {
            std::unique_lock<std::mutex> lock(mutex_);
            stopping_ = true;
            ++generation_;
        }
        cv_work_.notify_all();
        for (auto& t : workers_) t.join();
        workers_.clear();
    }

    void worker_loop() {
        std::uint64_t seen = 0;
        while (true) {
            std::unique_lock<std::mutex> lock(mutex_);
            cv_work_.wait(lock, [&] { return stopping_ || generation_ != seen; });
            seen = generation_;
            if (stopping_) return;
            while (job_fn_ != nullptr && next_chunk_ < job_chunks_) {
                const std::size_t idx = next_chunk_++;
                const auto* fn = job_fn_;
                const std::size_t b = chunk_begin(idx, job_base_, job_rem_);
                const std::size_t e = chunk_begin(idx + 1, job_base_, job_rem_);
                lock.unlock();
                (*fn)(b, e);
                lock.lock();
                if (--pending_ == 0) cv_done_.notify_all();
            }
        }
    }

    std::size_t threads_requested_ = 1;
    std::vector<std::thread> workers_;

    std::mutex mutex_;
    std::condition_variable cv_work_;
    std::condition_variable cv_done_;
    bool stopping_ = false;
    std::uint64_t generation_ = 0;

    const std::function<void(std::size_t, std::size_t)>* job_fn_ = nullptr;
    std::size_t job_chunks_ = 0;
    std::size_t job_base_ = 0;
    std::size_t job_rem_ = 0;
    std::size_t next_chunk_ = 0;
    std::size_t pending_ = 0;
};

inline void set_threads(std::size_t n) { ThreadPool::instance().set_threads(n); }

inline void parallel_for(std::size_t count, const std::function<void(std::size_t, std::size_t)>& fn) {
    ThreadPool::instance().parallel_for(count, fn);
}

}  // namespace musr
