// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "gsd/common.hpp"
#include "gsd/diffusion.hpp"
#include "gsd/guidance.hpp"
#include "gsd/io.hpp"

// File exchange with out-of-process models.
//
//   request  <dir>/req_<id>.gsdt : 4-byte kind tag ("DNSR", "FEAT" or "DPTH"),
//                                  float dump of the input (frames stacked
//                                  vertically), u32 timestep, float dump of the
//                                  condition image (0x0x0 when absent)
//   response <dir>/resp_<id>.gsdt: float dump of the result
//
// Both sides write to a temporary name and rename, so a file that exists is
// complete. The requester deletes the response after reading it.

namespace gsd::external {

enum class Kind { denoise, features, depth };

inline std::array<char, 4> kind_tag(Kind k) {
  switch (k) {
    case Kind::denoise: return {'D', 'N', 'S', 'R'};
    case Kind::features: return {'F', 'E', 'A', 'T'};
    case Kind::depth: return {'D', 'P', 'T', 'H'};
  }
  return {'?', '?', '?', '?'};
}

inline Kind parse_kind(const std::array<char, 4>& tag) {
  for (Kind k : {Kind::denoise, Kind::features, Kind::depth})
    if (kind_tag(k) == tag) return k;
  throw ValidationError("external request: unknown kind tag");
}

struct Request {
  Kind kind = Kind::denoise;
  Image tensor;
  std::uint32_t timestep = 0;
  Image condition;
};

inline void write_request(std::ostream& os, const Request& r) {
  const auto tag = kind_tag(r.kind);
  os.write(tag.data(), 4);
  io::write_dump(os, r.tensor);
  io::put_u32(os, r.timestep);
  io::write_dump(os, r.condition);
}

inline Request read_request(std::istream& is) {
  std::array<char, 4> tag{};
  is.read(tag.data(), 4);
  if (!is) throw ValidationError("external request: truncated tag");
  Request r;
  r.kind = parse_kind(tag);
  r.tensor = io::read_dump(is);
  r.timestep = io::get_u32(is);
  r.condition = io::read_dump(is);
  return r;
}

namespace detail {

template <typename Fn>
void write_atomically(const std::filesystem::path& path, Fn&& fill) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw ExternalModelError("cannot write " + tmp.string());
    fill(os);
  }
  std::filesystem::rename(tmp, path);
}

inline std::string next_id() {
  static std::atomic<std::uint64_t> counter{0};
  const auto now = std::chrono::steady_clock::now().time_since_epoch().count();
  std::ostringstream os;
  os << std::hex << static_cast<std::uint64_t>(now) << '_' << counter++;
  return os.str();
}

}  // namespace detail

/// Requester side of the exchange directory.
class Exchange {
 public:
  explicit Exchange(std::filesystem::path dir, std::chrono::milliseconds timeout = std::chrono::seconds(60))
      : dir_(std::move(dir)), timeout_(timeout) {
    require(std::filesystem::is_directory(dir_), "external exchange directory does not exist: " + dir_.string());
  }

  /// Directory named by GSD_EXTERNAL_DIR; throws when unset.
  static Exchange from_environment() {
    const char* dir = std::getenv("GSD_EXTERNAL_DIR");
    if (!dir || !*dir) throw ValidationError("GSD_EXTERNAL_DIR is not set");
    return Exchange(dir);
  }

  const std::filesystem::path& directory() const { return dir_; }

  Image call(const Request& request) const {
    const std::string id = detail::next_id();
    const auto req = dir_ / ("req_" + id + ".gsdt");
    const auto resp = dir_ / ("resp_" + id + ".gsdt");
    detail::write_atomically(req, [&](std::ostream& os) { write_request(os, request); });
    const auto deadline = std::chrono::steady_clock::now() + timeout_;
    while (!std::filesystem::exists(resp)) {
      if (std::chrono::steady_clock::now() > deadline) {
        std::error_code ec;
        std::filesystem::remove(req, ec);
        throw ExternalModelError("external model did not answer " + req.filename().string() + " within the timeout");
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    std::ifstream is(resp, std::ios::binary);
    if (!is) throw ExternalModelError("cannot read " + resp.string());
    Image out = io::read_dump(is);
    is.close();
    std::error_code ec;
    std::filesystem::remove(resp, ec);
    return out;
  }

 private:
  std::filesystem::path dir_;
  std::chrono::milliseconds timeout_;
};

/// Responder helper: answers one pending request with fn, returns false when
/// no request was waiting.
template <typename Fn>
bool serve_one(const std::filesystem::path& dir, Fn&& fn) {
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("req_", 0) != 0 || entry.path().extension() != ".gsdt") continue;
    Request r;
    {
      std::ifstream is(entry.path(), std::ios::binary);
      r = read_request(is);
    }
    std::filesystem::remove(entry.path());
    const Image answer = fn(r);
    const std::string id = name.substr(4);
    detail::write_atomically(dir / ("resp_" + id), [&](std::ostream& os) { io::write_dump(os, answer); });
    return true;
  }
  return false;
}

/// Denoiser backed by the exchange. Single-flight.
class ExternalDenoiser final : public Denoiser {
 public:
  explicit ExternalDenoiser(Exchange exchange) : exchange_(std::move(exchange)) {}
  Clip predict(const Clip& x_t, int t, const Image& condition) const override {
    const Image out = exchange_.call({Kind::denoise, io::stack_frames(x_t), static_cast<std::uint32_t>(t), condition});
    const int h = x_t.front().height;
    Clip eps = io::unstack_frames(out, h);
    if (!same_shape(eps, x_t)) throw ExternalModelError("external denoiser returned a tensor of the wrong shape");
    return eps;
  }
  bool single_flight() const override { return true; }

 private:
  Exchange exchange_;
};

/// Feature extractor backed by the exchange; features come back as any
/// H x W x C dump and are flattened.
class ExternalFeatureExtractor final : public FeatureExtractor {
 public:
  explicit ExternalFeatureExtractor(Exchange exchange) : exchange_(std::move(exchange)) {}
  std::vector<double> extract(const Image& image) const override {
    return exchange_.call({Kind::features, image, 0, Image{}}).data;
  }

 private:
  Exchange exchange_;
};

/// Relative depth estimator backed by the exchange.
class ExternalDepthEstimator {
 public:
  explicit ExternalDepthEstimator(Exchange exchange) : exchange_(std::move(exchange)) {}
  Image estimate(const Image& rgb) const {
    Image d = exchange_.call({Kind::depth, rgb, 0, Image{}});
    if (d.height != rgb.height || d.width != rgb.width || d.channels != 1)
      throw ExternalModelError("external depth estimator returned a map of the wrong shape");
    return d;
  }

 private:
  Exchange exchange_;
};

}  // namespace gsd::external
