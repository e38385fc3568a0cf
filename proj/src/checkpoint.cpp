#include "wmr/checkpoint.hpp"

#include "wmr/errors.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

namespace wmr::checkpoint {

namespace {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

constexpr std::array<char, 4> kMagic = {'W', 'M', 'R', 'T'};
constexpr std::uint32_t kVersion = 1;

std::uint8_t dtype_code(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat: return 0;
    case torch::kDouble: return 1;
    case torch::kLong: return 2;
    case torch::kUInt8: return 3;
    default: throw InputError(std::string("unsupported tensor dtype ") + c10::toString(t));
  }
}

torch::ScalarType dtype_from_code(std::uint8_t c) {
  switch (c) {
    case 0: return torch::kFloat;
    case 1: return torch::kDouble;
    case 2: return torch::kLong;
    case 3: return torch::kUInt8;
    default: throw InputError("corrupt archive: unknown dtype code " + std::to_string(c));
  }
}

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) {
    throw InputError("corrupt archive: unexpected end of file");
  }
  return v;
}

std::string join(const std::vector<std::string>& keys) {
  std::string out;
  for (const auto& k : keys) {
    out += (out.empty() ? "" : ", ") + k;
  }
  return out;
}

}  // namespace

void save(const std::filesystem::path& path, const TensorMap& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) {
    throw RuntimeFailure("cannot open " + path.string() + " for writing");
  }
  os.write(kMagic.data(), kMagic.size());
  put<std::uint32_t>(os, kVersion);
  put<std::uint64_t>(os, tensors.size());
  for (const auto& [key, value] : tensors) {
    auto t = value.detach().cpu().contiguous();
    put<std::uint32_t>(os, static_cast<std::uint32_t>(key.size()));
    os.write(key.data(), static_cast<std::streamsize>(key.size()));
    put<std::uint8_t>(os, dtype_code(t.scalar_type()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(t.dim()));
    for (auto d : t.sizes()) put<std::int64_t>(os, d);
    const auto nbytes = static_cast<std::uint64_t>(t.numel() * t.element_size());
    put<std::uint64_t>(os, nbytes);
    os.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(nbytes));
  }
  if (!os) {
    throw RuntimeFailure("failed writing " + path.string());
  }
}

TensorMap load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw InputError("cannot open archive " + path.string());
  }
  std::array<char, 4> magic{};
  is.read(magic.data(), magic.size());
  if (!is || magic != kMagic) {
    throw InputError("not a parameter archive: " + path.string());
  }
  if (const auto v = get<std::uint32_t>(is); v != kVersion) {
    throw InputError("unsupported archive version " + std::to_string(v));
  }
  const auto count = get<std::uint64_t>(is);
  TensorMap out;
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string key(get<std::uint32_t>(is), '\0');
    is.read(key.data(), static_cast<std::streamsize>(key.size()));
    const auto dtype = dtype_from_code(get<std::uint8_t>(is));
    std::vector<std::int64_t> dims(get<std::uint32_t>(is));
    for (auto& d : dims) d = get<std::int64_t>(is);
    const auto nbytes = get<std::uint64_t>(is);
    auto t = torch::empty(dims, torch::TensorOptions().dtype(dtype));
    if (static_cast<std::uint64_t>(t.numel() * t.element_size()) != nbytes) {
      throw InputError("corrupt archive: size mismatch for " + key);
    }
    is.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(nbytes));
    if (!is) {
      throw InputError("corrupt archive: truncated data for " + key);
    }
    out.emplace(std::move(key), std::move(t));
  }
  return out;
}

TensorMap state_of(const torch::nn::Module& module) {
  TensorMap out;
  for (const auto& p : module.named_parameters(true)) out.emplace(p.key(), p.value().detach().clone());
  for (const auto& b : module.named_buffers(true)) out.emplace(b.key(), b.value().detach().clone());
  return out;
}

LoadReport apply(torch::nn::Module& module, const TensorMap& tensors, const std::string& prefix, bool strict) {
  std::map<std::string, torch::Tensor> targets;
  for (const auto& p : module.named_parameters(true)) targets.emplace(p.key(), p.value());
  for (const auto& b : module.named_buffers(true)) targets.emplace(b.key(), b.value());

  auto in_scope = [&](const std::string& k) { return k.compare(0, prefix.size(), prefix) == 0; };
  LoadReport report;
  for (const auto& [key, target] : targets) {
    if (!in_scope(key)) continue;
    auto it = tensors.find(key);
    if (it == tensors.end()) {
      report.missing.push_back(key);
      continue;
    }
    if (it->second.sizes() != target.sizes()) {
      throw InputError("shape mismatch for " + key + ": archive " + c10::str(it->second.sizes()) + " vs model " +
                       c10::str(target.sizes()));
    }
    report.loaded.push_back(key);
  }
  for (const auto& [key, value] : tensors) {
    if (in_scope(key) && !targets.count(key)) report.unexpected.push_back(key);
  }
  if (strict && (!report.missing.empty() || !report.unexpected.empty())) {
    std::string msg = "strict load failed";
    if (!report.missing.empty()) msg += "; missing keys: " + join(report.missing);
    if (!report.unexpected.empty()) msg += "; unexpected keys: " + join(report.unexpected);
    throw InputError(msg);
  }
  torch::NoGradGuard guard;
  for (const auto& key : report.loaded) {
    auto& target = targets.at(key);
    target.copy_(tensors.at(key).to(target.dtype()));
  }
  return report;
}

}  // namespace wmr::checkpoint
