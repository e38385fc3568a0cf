#pragma once

#include "wmr/blocks.hpp"
#include "wmr/synth.hpp"

#include <torch/torch.h>

#include <sys/wait.h>

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <random>
#include <string>
#include <vector>

namespace wmr::test {

/// Directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("wmr_test_" + std::to_string(rd()) + "_" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

inline std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

/// Every regular file under `a` exists under `b` with identical bytes, and
/// vice versa.
inline bool trees_identical(const std::filesystem::path& a, const std::filesystem::path& b) {
  namespace fs = std::filesystem;
  std::vector<fs::path> ra, rb;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (e.is_regular_file()) ra.push_back(fs::relative(e.path(), a));
  }
  for (const auto& e : fs::recursive_directory_iterator(b)) {
    if (e.is_regular_file()) rb.push_back(fs::relative(e.path(), b));
  }
  std::sort(ra.begin(), ra.end());
  std::sort(rb.begin(), rb.end());
  if (ra != rb || ra.empty()) return false;
  for (const auto& r : ra) {
    if (read_bytes(a / r) != read_bytes(b / r)) return false;
  }
  return true;
}

struct CommandResult {
  int exit_code = -1;
  std::string output;
};

/// Runs the wmr CLI with `args` (shell-quoted by the caller), capturing stdout.
inline CommandResult run_cli(const std::string& args) {
  const std::string cmd = std::string("\"") + WMR_CLI_PATH + "\" " + args + " 2>/dev/null";
  CommandResult r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), static_cast<int>(buf.size()), pipe)) r.output += buf.data();
  const int status = pclose(pipe);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

/// d = 4 with 8x8 features at 32x32 input: the smallest configuration that
/// still exercises every block, for double-precision gradient checks.
inline ModelConfig tiny_config() {
  ModelConfig c;
  c.height = 32;
  c.width = 32;
  c.downsample_stages = 2;
  c.channels = 4;
  c.base_channels = 4;
  c.ta_blocks_per_branch = 2;
  c.ffc_blocks = 3;
  c.ffc_groups = 3;
  c.disc_channels = 2;
  return c;
}

/// Fills every parameter with small random values (including zero-initialized
/// projections) so that no path is trivially closed.
inline void randomize(torch::nn::Module& m, std::uint64_t seed, double scale = 0.3) {
  torch::NoGradGuard g;
  auto gen = at::detail::createCPUGenerator(seed);
  for (auto& p : m.parameters()) p.copy_(torch::randn(p.sizes(), gen, p.scalar_type()) * scale);
}

/// Relative error between the analytic directional derivative of the scalar
/// `f` along a random direction in `params` and its central finite difference.
inline double directional_fd_error(const std::vector<torch::Tensor>& params, const std::function<torch::Tensor()>& f,
                                   std::uint64_t seed, double eps = 1e-6) {
  auto gen = at::detail::createCPUGenerator(seed);
  std::vector<torch::Tensor> dirs;
  for (const auto& p : params) dirs.push_back(torch::randn(p.sizes(), gen, p.scalar_type()));
  auto out = f();
  auto grads = torch::autograd::grad({out}, params, {}, false, false, /*allow_unused=*/true);
  double analytic = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].defined()) analytic += (grads[i] * dirs[i]).sum().item<double>();
  }
  // f is evaluated with autograd enabled so objectives that differentiate
  // internally (the gradient penalty) still work.
  auto shift = [&](double by) {
    torch::NoGradGuard guard;
    for (std::size_t i = 0; i < params.size(); ++i) params[i].add_(dirs[i] * by);
  };
  shift(eps);
  const double fp = f().item<double>();
  shift(-2 * eps);
  const double fm = f().item<double>();
  shift(eps);
  const double numeric = (fp - fm) / (2 * eps);
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-10});
}

/// Fixed random projection of a tensor to a scalar.
inline torch::Tensor project(const torch::Tensor& t, std::uint64_t seed) {
  auto gen = at::detail::createCPUGenerator(seed);
  return (t * torch::randn(t.sizes(), gen, t.scalar_type())).sum();
}

inline torch::Tensor random_binary_mask(std::int64_t n, std::int64_t h, std::int64_t w, std::uint64_t seed,
                                        double p = 0.3) {
  auto gen = at::detail::createCPUGenerator(seed);
  return (torch::rand({n, 1, h, w}, gen, torch::kFloat) < p).to(torch::kFloat);
}

/// Writes a small procedural dataset under `dir` and opens it.
inline synth::Dataset make_dataset(const std::filesystem::path& dir, std::int64_t n, std::uint64_t seed,
                                   int size = 32) {
  auto bgs = synth::SourceCollection::procedural(synth::SourceCollection::Kind::backgrounds, 8);
  auto wms = synth::SourceCollection::procedural(synth::SourceCollection::Kind::watermarks, 8);
  synth::GenerateOptions o;
  o.n = n;
  o.master_seed = seed;
  o.image_size = size;
  synth::generate_dataset(bgs, wms, o, dir);
  return synth::Dataset::open(dir);
}

}  // namespace wmr::test
