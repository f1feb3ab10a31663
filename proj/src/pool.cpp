#include "nesy/pool.h"

namespace nesy {

WorkerPool::WorkerPool(unsigned workers) {
	threads_.reserve(workers);
	for (unsigned i = 0; i < workers; ++i) threads_.emplace_back([this] { loop(); });
}

WorkerPool::~WorkerPool() {
	{
		std::lock_guard lock(mu_);
		stop_ = true;
	}
	work_cv_.notify_all();
	for (auto& t : threads_) t.join();
}

void WorkerPool::parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
	if (n == 0) return;
	if (threads_.empty()) {
		for (std::size_t i = 0; i < n; ++i) fn(i);
		return;
	}
	std::unique_lock lock(mu_);
	job_ = &fn;
	next_ = 0;
	total_ = n;
	finished_ = 0;
	error_ = nullptr;
	work_cv_.notify_all();
	done_cv_.wait(lock, [&] { return finished_ == total_; });
	job_ = nullptr;
	if (error_) std::rethrow_exception(error_);
}

void WorkerPool::loop() {
	std::unique_lock lock(mu_);
	for (;;) {
		work_cv_.wait(lock, [&] { return stop_ || (job_ && next_ < total_); });
		if (stop_) return;
		const std::size_t i = next_++;
		const auto* fn = job_;
		lock.unlock();
		std::exception_ptr err;
		try {
			(*fn)(i);
		} catch (...) {
			err = std::current_exception();
		}
		lock.lock();
		if (err && !error_) error_ = err;
		if (++finished_ == total_) done_cv_.notify_all();
	}
}

} // namespace nesy
