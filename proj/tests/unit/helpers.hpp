#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "cre/image.hpp"
#include "cre/rng.hpp"
#include "cre/tensor.hpp"

namespace cre::test {

inline Tensor<double> random_tensor(Shape shape, std::uint64_t seed, bool grad = true,
                                    double scale = 1.0) {
  Rng rng(seed);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = scale * rng.normal();
  return Tensor<double>(std::move(shape), std::move(v), grad);
}

inline Tensor<float> random_tensor_f(Shape shape, std::uint64_t seed, bool grad = true) {
  return random_tensor(std::move(shape), seed, grad).cast<float>();
}

inline Image random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  Rng rng(seed);
  Image img = Image::zeros(h, w, 3);
  for (auto& p : img.pixels) p = static_cast<float>(rng.uniform());
  return img;
}

inline Image solid_image(std::size_t h, std::size_t w, float r, float g, float b) {
  Image img = Image::zeros(h, w, 3);
  for (std::size_t i = 0; i < h * w; ++i) {
    img.pixels[3 * i] = r;
    img.pixels[3 * i + 1] = g;
    img.pixels[3 * i + 2] = b;
  }
  return img;
}

// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    Rng rng(std::hash<std::string>{}(tag) ^ reinterpret_cast<std::uintptr_t>(this));
    path_ = std::filesystem::temp_directory_path() /
            ("cre-" + tag + "-" + std::to_string(rng.next() % 1000000007));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace cre::test
