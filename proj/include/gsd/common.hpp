// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <functional>
#include <iostream>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace gsd {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// Input violates a documented precondition. The CLI maps it to exit code 2.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A covariance matrix is too ill-conditioned to invert.
class SingularityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A non-finite value escaped a denoiser or another pluggable model.
class PropagationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The external-model exchange failed (timeout, malformed response).
class ExternalModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training stopped by the divergence guard. The CLI maps it to exit code 3.
class TrainingAbort : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ValidationError(what);
}

// ---------------------------------------------------------------------------
// Logging
// ---------------------------------------------------------------------------

namespace log {

enum class Level { debug, info, warn };

using Sink = std::function<void(Level, const std::string&)>;

inline Sink& sink() {
  static Sink s = [](Level level, const std::string& msg) {
    if (level == Level::debug) return;
    std::clog << (level == Level::warn ? "[gsd warn] " : "[gsd] ") << msg << '\n';
  };
  return s;
}

inline std::mutex& sink_mutex() {
  static std::mutex m;
  return m;
}

inline void emit(Level level, const std::string& msg) {
  std::lock_guard lock(sink_mutex());
  if (sink()) sink()(level, msg);
}

inline void info(const std::string& msg) { emit(Level::info, msg); }
inline void warn(const std::string& msg) { emit(Level::warn, msg); }
inline void debug(const std::string& msg) { emit(Level::debug, msg); }

/// Swaps the sink for the lifetime of the guard.
class ScopedSink {
 public:
  explicit ScopedSink(Sink s) : previous_(std::move(sink())) { sink() = std::move(s); }
  ~ScopedSink() { sink() = std::move(previous_); }
  ScopedSink(const ScopedSink&) = delete;
  ScopedSink& operator=(const ScopedSink&) = delete;

 private:
  Sink previous_;
};

}  // namespace log

// ---------------------------------------------------------------------------
// Images
// ---------------------------------------------------------------------------

/// Dense row-major H x W x C image of doubles.
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> data;

  Image() = default;
  Image(int h, int w, int c, double fill = 0.0)
      : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {
    require(h >= 0 && w >= 0 && c >= 0, "image dimensions must be non-negative");
  }

  std::size_t size() const { return data.size(); }
  std::size_t pixels() const { return static_cast<std::size_t>(height) * width; }
  bool empty() const { return data.empty(); }

  std::size_t index(int y, int x, int c = 0) const {
    return (static_cast<std::size_t>(y) * width + x) * channels + c;
  }
  double& operator()(int y, int x, int c = 0) { return data[index(y, x, c)]; }
  double operator()(int y, int x, int c = 0) const { return data[index(y, x, c)]; }

  bool same_shape(const Image& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }

  friend bool operator==(const Image&, const Image&) = default;
};

/// Ordered frames of equal shape; the tensor a video denoiser consumes.
using Clip = std::vector<Image>;

inline bool same_shape(const Clip& a, const Clip& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!a[i].same_shape(b[i])) return false;
  return true;
}

inline bool all_finite(const Image& img) {
  return std::all_of(img.data.begin(), img.data.end(), [](double v) { return std::isfinite(v); });
}

inline bool all_finite(const Clip& clip) {
  return std::all_of(clip.begin(), clip.end(), [](const Image& f) { return all_finite(f); });
}

/// Single channel of a multi-channel image.
inline Image channel(const Image& img, int c) {
  Image out(img.height, img.width, 1);
  for (std::size_t p = 0; p < img.pixels(); ++p) out.data[p] = img.data[p * img.channels + c];
  return out;
}

inline constexpr double kLumaR = 0.299;
inline constexpr double kLumaG = 0.587;
inline constexpr double kLumaB = 0.114;

/// ITU-R BT.601 luma of an RGB image.
inline Image luma(const Image& rgb) {
  require(rgb.channels == 3, "luma expects an RGB image");
  Image out(rgb.height, rgb.width, 1);
  for (std::size_t p = 0; p < rgb.pixels(); ++p) {
    const double* px = &rgb.data[p * 3];
    out.data[p] = kLumaR * px[0] + kLumaG * px[1] + kLumaB * px[2];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parallelism
// ---------------------------------------------------------------------------

/// Worker count used by parallel_for. Reads GSD_THREADS once; defaults to
/// the hardware concurrency.
inline int& thread_count() {
  static int n = [] {
    if (const char* env = std::getenv("GSD_THREADS")) {
      const int v = std::atoi(env);
      if (v > 0) return v;
    }
    return std::max(1, static_cast<int>(std::thread::hardware_concurrency()));
  }();
  return n;
}

/// Runs fn(i) for i in [0, n). Work items are claimed dynamically, so fn must
/// only write to state owned by item i.
template <class Fn>
void parallel_for(int n, Fn&& fn) {
  const int workers = std::min(thread_count(), n);
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto body = [&] {
    try {
      for (int i = next++; i < n; i = next++) fn(i);
    } catch (...) {
      std::lock_guard lock(failure_mutex);
      if (!failure) failure = std::current_exception();
      next = n;
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (int w = 1; w < workers; ++w) pool.emplace_back(body);
  body();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace gsd
