// Fixed-size worker pool for independent tasks. Zero workers runs tasks
// inline on the caller, which is the sequential reference.
#pragma once

#include <condition_variable>
#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace nesy {

class WorkerPool {
public:
	explicit WorkerPool(unsigned workers);
	~WorkerPool();
	WorkerPool(const WorkerPool&) = delete;
	WorkerPool& operator=(const WorkerPool&) = delete;

	unsigned workers() const { return static_cast<unsigned>(threads_.size()); }

	/// Runs fn(0..n-1) and blocks until all calls return. The first exception
	/// thrown by any call is rethrown here after the barrier.
	void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

private:
	void loop();

	std::vector<std::thread> threads_;
	std::mutex mu_;
	std::condition_variable work_cv_;
	std::condition_variable done_cv_;
	const std::function<void(std::size_t)>* job_ = nullptr;
	std::size_t next_ = 0;
	std::size_t total_ = 0;
	std::size_t finished_ = 0;
	bool stop_ = false;
	std::exception_ptr error_;
};

} // namespace nesy
