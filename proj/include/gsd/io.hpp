// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "gsd/common.hpp"
#include "gsd/scene.hpp"

namespace gsd::io {

// ---------------------------------------------------------------------------
// Binary PPM (P6, 8-bit)
// ---------------------------------------------------------------------------

inline std::uint8_t quantize_u8(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

inline void write_ppm(std::ostream& os, const Image& img) {
  require(img.channels == 3 || img.channels == 1, "PPM output needs 1 or 3 channels");
  os << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  std::vector<std::uint8_t> bytes(img.pixels() * 3);
  for (std::size_t p = 0; p < img.pixels(); ++p)
    for (int c = 0; c < 3; ++c)
      bytes[3 * p + c] = quantize_u8(img.data[p * img.channels + (img.channels == 3 ? c : 0)]);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline Image read_ppm(std::istream& is) {
  auto token = [&is] {
    std::string t;
    while (is >> t) {
      if (t[0] != '#') return t;
      std::string rest;
      std::getline(is, rest);
    }
    throw ValidationError("PPM: truncated header");
  };
  if (token() != "P6") throw ValidationError("PPM: expected P6 magic");
  const int w = std::stoi(token());
  const int h = std::stoi(token());
  const int maxval = std::stoi(token());
  if (maxval != 255) throw ValidationError("PPM: only 8-bit images are supported");
  is.get();  // single whitespace after maxval
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(w) * h * 3);
  is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!is) throw ValidationError("PPM: truncated pixel data");
  Image img(h, w, 3);
  for (std::size_t k = 0; k < bytes.size(); ++k) img.data[k] = bytes[k] / 255.0;
  return img;
}

inline void write_ppm(const std::filesystem::path& path, const Image& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ValidationError("cannot open " + path.string() + " for writing");
  write_ppm(os, img);
}

inline Image read_ppm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot open " + path.string());
  return read_ppm(is);
}

// ---------------------------------------------------------------------------
// Raw float32 dump: "GSDF", u32 H, u32 W, u32 C, then H*W*C little-endian
// float32 values in row-major HWC order.
// ---------------------------------------------------------------------------

inline constexpr std::array<char, 4> kDumpMagic = {'G', 'S', 'D', 'F'};

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const std::array<char, 4> b = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                                 static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b.data(), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  std::array<unsigned char, 4> b{};
  is.read(reinterpret_cast<char*>(b.data()), 4);
  if (!is) throw ValidationError("float dump: truncated integer field");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void write_dump(std::ostream& os, const Image& img) {
  os.write(kDumpMagic.data(), 4);
  put_u32(os, static_cast<std::uint32_t>(img.height));
  put_u32(os, static_cast<std::uint32_t>(img.width));
  put_u32(os, static_cast<std::uint32_t>(img.channels));
  for (double v : img.data) {
    const float f = static_cast<float>(v);
    std::uint32_t bits = 0;
    std::memcpy(&bits, &f, 4);
    put_u32(os, bits);
  }
}

inline Image read_dump(std::istream& is) {
  std::array<char, 4> magic{};
  is.read(magic.data(), 4);
  if (!is || magic != kDumpMagic) throw ValidationError("float dump: bad magic");
  const auto h = get_u32(is);
  const auto w = get_u32(is);
  const auto c = get_u32(is);
  Image img(static_cast<int>(h), static_cast<int>(w), static_cast<int>(c));
  for (double& v : img.data) {
    const std::uint32_t bits = get_u32(is);
    float f = 0.0f;
    std::memcpy(&f, &bits, 4);
    v = f;
  }
  return img;
}

inline void write_dump(const std::filesystem::path& path, const Image& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ValidationError("cannot open " + path.string() + " for writing");
  write_dump(os, img);
}

inline Image read_dump(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot open " + path.string());
  return read_dump(is);
}

/// Rounds every value through float32, matching what write_dump stores.
inline Image as_stored(Image img) {
  for (double& v : img.data) v = static_cast<double>(static_cast<float>(v));
  return img;
}

/// Stacks frames vertically into one (n*H) x W x C image.
inline Image stack_frames(const Clip& clip) {
  require(!clip.empty(), "cannot stack an empty clip");
  const Image& f0 = clip.front();
  Image out(f0.height * static_cast<int>(clip.size()), f0.width, f0.channels);
  for (std::size_t i = 0; i < clip.size(); ++i) {
    require(clip[i].same_shape(f0), "clip frames differ in shape");
    std::copy(clip[i].data.begin(), clip[i].data.end(), out.data.begin() + i * f0.size());
  }
  return out;
}

inline Clip unstack_frames(const Image& stacked, int frame_height) {
  require(frame_height > 0 && stacked.height % frame_height == 0, "stacked height is not a multiple of the frame height");
  Clip clip;
  const int n = stacked.height / frame_height;
  for (int i = 0; i < n; ++i) {
    Image f(frame_height, stacked.width, stacked.channels);
    std::copy(stacked.data.begin() + i * f.size(), stacked.data.begin() + (i + 1) * f.size(), f.data.begin());
    clip.push_back(std::move(f));
  }
  return clip;
}

// ---------------------------------------------------------------------------
// Scene text format
//
//   # comments start with '#'
//   gsd-scene <D> <N>
//   mx my mz qw qx qy qz sx sy sz o c_0r c_0g c_0b ... (N lines, 3*D*D colour values)
//   gsd-cameras <M>
//   fx fy cx cy W H r11 r12 r13 r21 r22 r23 r31 r32 r33 t1 t2 t3   (M lines)
//
// Scales are written as positive values, o is the opacity logit. The camera
// section is optional.
// ---------------------------------------------------------------------------

struct SceneFile {
  GaussianCloud cloud;
  std::vector<Camera> cameras;
};

inline void write_scene(std::ostream& os, const GaussianCloud& cloud, const std::vector<Camera>& cameras = {}) {
  os << std::setprecision(17);
  os << "# mx my mz qw qx qy qz sx sy sz opacity_logit sh(coefficient-major, rgb)\n";
  os << "gsd-scene " << cloud.sh_degree << ' ' << cloud.size() << '\n';
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Vec3 m = cloud.mean(i);
    const Vec4 q = cloud.quat(i);
    const Vec3 s = cloud.scale(i);
    os << m[0] << ' ' << m[1] << ' ' << m[2] << ' ' << q[0] << ' ' << q[1] << ' ' << q[2] << ' ' << q[3] << ' '
       << s[0] << ' ' << s[1] << ' ' << s[2] << ' ' << cloud.opacity_logit[i];
    for (double c : cloud.sh_coeffs(i)) os << ' ' << c;
    os << '\n';
  }
  if (!cameras.empty()) {
    os << "# fx fy cx cy W H r11..r33 t1 t2 t3\n";
    os << "gsd-cameras " << cameras.size() << '\n';
    for (const Camera& c : cameras) {
      os << c.fx << ' ' << c.fy << ' ' << c.cx << ' ' << c.cy << ' ' << c.width << ' ' << c.height;
      for (int r = 0; r < 3; ++r)
        for (int k = 0; k < 3; ++k) os << ' ' << c.rotation(r, k);
      for (int k = 0; k < 3; ++k) os << ' ' << c.translation[k];
      os << '\n';
    }
  }
}

namespace detail {

inline bool next_content_line(std::istream& is, std::string& line) {
  while (std::getline(is, line)) {
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    return true;
  }
  return false;
}

inline std::vector<double> parse_numbers(const std::string& line, std::size_t expected, const char* what) {
  std::istringstream ls(line);
  std::vector<double> v;
  double x = 0;
  while (ls >> x) v.push_back(x);
  if (v.size() != expected) {
    std::ostringstream os;
    os << what << ": expected " << expected << " values, got " << v.size();
    throw ValidationError(os.str());
  }
  return v;
}

}  // namespace detail

inline SceneFile read_scene(std::istream& is) {
  std::string line;
  if (!detail::next_content_line(is, line)) throw ValidationError("scene file: missing header");
  std::istringstream hs(line);
  std::string tag;
  int degree = 0;
  long count = -1;
  hs >> tag >> degree >> count;
  if (tag != "gsd-scene" || count < 0) throw ValidationError("scene file: bad header line '" + line + "'");
  SceneFile out;
  out.cloud = GaussianCloud(degree);
  const std::size_t per_line = 11 + 3 * static_cast<std::size_t>(sh_count(degree));
  for (long i = 0; i < count; ++i) {
    if (!detail::next_content_line(is, line)) throw ValidationError("scene file: truncated Gaussian list");
    const auto v = detail::parse_numbers(line, per_line, "scene file Gaussian line");
    const Vec3 s(v[7], v[8], v[9]);
    require((s.array() > 0.0).all(), "scene file: scales must be positive");
    out.cloud.add(Vec3(v[0], v[1], v[2]), Vec4(v[3], v[4], v[5], v[6]), s, v[10],
                  std::span<const double>(v.data() + 11, v.size() - 11));
  }
  if (detail::next_content_line(is, line)) {
    std::istringstream cs(line);
    long m = -1;
    cs >> tag >> m;
    if (tag != "gsd-cameras" || m < 0) throw ValidationError("scene file: bad camera header '" + line + "'");
    for (long i = 0; i < m; ++i) {
      if (!detail::next_content_line(is, line)) throw ValidationError("scene file: truncated camera list");
      const auto v = detail::parse_numbers(line, 18, "scene file camera line");
      Camera c;
      c.fx = v[0];
      c.fy = v[1];
      c.cx = v[2];
      c.cy = v[3];
      c.width = static_cast<int>(v[4]);
      c.height = static_cast<int>(v[5]);
      for (int r = 0; r < 3; ++r)
        for (int k = 0; k < 3; ++k) c.rotation(r, k) = v[6 + 3 * r + k];
      for (int k = 0; k < 3; ++k) c.translation[k] = v[15 + k];
      c.validate();
      out.cameras.push_back(c);
    }
  }
  return out;
}

inline void write_scene(const std::filesystem::path& path, const GaussianCloud& cloud,
                        const std::vector<Camera>& cameras = {}) {
  std::ofstream os(path);
  if (!os) throw ValidationError("cannot open " + path.string() + " for writing");
  write_scene(os, cloud, cameras);
}

inline SceneFile read_scene(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot open " + path.string());
  return read_scene(is);
}

}  // namespace gsd::io
