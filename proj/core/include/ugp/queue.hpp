#pragma once

#include <chrono>
#include <condition_variable>
#include <cstddef>
#include <deque>
#include <mutex>
#include <optional>
#include <vector>

namespace ugp {

/// Bounded multi-producer multi-consumer queue with cooperative shutdown.
///
/// After close(), push() fails and consumers drain what is left before
/// seeing an empty result.
template <typename T>
class BlockingQueue {
 public:
  explicit BlockingQueue(std::size_t capacity) : capacity_(capacity == 0 ? 1 : capacity) {}

  /// Blocks while full. Returns false once closed, leaving `item` untouched.
  bool push(const T& item) {
    T copy = item;
    return push(std::move(copy));
  }
  bool push(T&& item) {
    std::unique_lock lock(mutex_);
    not_full_.wait(lock, [&] { return closed_ || items_.size() < capacity_; });
    if (closed_) return false;
    items_.push_back(std::move(item));
    not_empty_.notify_one();
    return true;
  }

  /// Waits for at least one item, then keeps collecting until `max_items` are
  /// gathered or `linger` has elapsed since the first one arrived.
  std::vector<T> pop_batch(std::size_t max_items, std::chrono::microseconds linger) {
    std::vector<T> out;
    std::unique_lock lock(mutex_);
    not_empty_.wait(lock, [&] { return closed_ || !items_.empty(); });
    const auto deadline = std::chrono::steady_clock::now() + linger;
    while (out.size() < max_items) {
      while (!items_.empty() && out.size() < max_items) {
        out.push_back(std::move(items_.front()));
        items_.pop_front();
      }
      not_full_.notify_all();
      if (out.size() >= max_items || closed_ || linger.count() == 0) break;
      if (!not_empty_.wait_until(lock, deadline, [&] { return closed_ || !items_.empty(); })) break;
    }
    return out;
  }

  std::optional<T> pop() {
    std::unique_lock lock(mutex_);
    not_empty_.wait(lock, [&] { return closed_ || !items_.empty(); });
    if (items_.empty()) return std::nullopt;
    T item = std::move(items_.front());
    items_.pop_front();
    not_full_.notify_one();
    return item;
  }

  void close() {
    std::lock_guard lock(mutex_);
    closed_ = true;
    not_empty_.notify_all();
    not_full_.notify_all();
  }

  /// Removes everything still queued (used to cancel pending work on shutdown).
  std::vector<T> drain() {
    std::lock_guard lock(mutex_);
    std::vector<T> out(std::make_move_iterator(items_.begin()), std::make_move_iterator(items_.end()));
    items_.clear();
    not_full_.notify_all();
    return out;
  }

  [[nodiscard]] std::size_t size() const {
    std::lock_guard lock(mutex_);
    return items_.size();
  }

  [[nodiscard]] bool closed() const {
    std::lock_guard lock(mutex_);
    return closed_;
  }

 private:
  const std::size_t capacity_;
  mutable std::mutex mutex_;
  std::condition_variable not_empty_;
  std::condition_variable not_full_;
  std::deque<T> items_;
  bool closed_ = false;
};

}  // namespace ugp
