#pragma once

#include <filesystem>
#include <string>

#include "gilab/camera.hpp"
#include "gilab/common.hpp"

namespace testutil {

// Random but always-valid camera: position on a sphere shell looking at a
// jittered target near the origin.
inline gilab::Camera random_camera(gilab::Rng &rng, int w = 32, int h = 24) {
  const double az = rng.uniform(0, 2 * M_PI);
  const double el = rng.uniform(-0.4, 1.2);
  const double r = rng.uniform(1.2, 3.0);
  const Eigen::Vector3d eye(r * std::cos(el) * std::cos(az), r * std::cos(el) * std::sin(az),
                            r * std::sin(el));
  const Eigen::Vector3d target(rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3),
                               rng.uniform(-0.3, 0.3));
  const double focal = rng.uniform(0.6, 2.0) * w;
  return gilab::Camera::look_at(eye, target, focal, w / 2.0 + rng.uniform(-2, 2),
                                h / 2.0 + rng.uniform(-2, 2), w, h);
}

class TempDir {
public:
  explicit TempDir(const std::string &tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("gilab_test_" + tag + "_" + std::to_string(::getpid()) + "_" +
             std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path &path() const { return path_; }

private:
  std::filesystem::path path_;
};

} // namespace testutil
