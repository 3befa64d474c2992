#include "scrl/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include "scrl/error.hpp"

namespace scrl {

namespace {

constexpr const char* kMagic = "scrl-archive 1";

std::string dtype_name(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32: return "f32";
    case torch::kFloat64: return "f64";
    case torch::kInt64: return "i64";
    case torch::kInt32: return "i32";
    case torch::kUInt8: return "u8";
    case torch::kBool: return "bool";
    default: throw Error("checkpoint", std::string("unsupported dtype ") + c10::toString(t));
  }
}

torch::ScalarType parse_dtype(const std::string& s) {
  if (s == "f32") return torch::kFloat32;
  if (s == "f64") return torch::kFloat64;
  if (s == "i64") return torch::kInt64;
  if (s == "i32") return torch::kInt32;
  if (s == "u8") return torch::kUInt8;
  if (s == "bool") return torch::kBool;
  throw Error("checkpoint", "unknown dtype '" + s + "'");
}

void expect_line(std::istream& is, const std::string& path, std::string& line) {
  if (!std::getline(is, line)) throw Error("checkpoint", "truncated archive " + path);
}

}  // namespace

void TensorArchive::add(std::string name, const torch::Tensor& t) {
  if (name.find_first_of(" \t\n") != std::string::npos) {
    throw Error("checkpoint", "tensor name contains whitespace: " + name);
  }
  tensors.emplace_back(std::move(name), t.detach().to(torch::kCPU).contiguous().clone());
}

const torch::Tensor* TensorArchive::find(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

const torch::Tensor& TensorArchive::at(const std::string& name) const {
  const auto* t = find(name);
  if (t == nullptr) throw Error("checkpoint", "missing tensor " + name);
  return *t;
}

void TensorArchive::save(const std::filesystem::path& path) const {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("checkpoint", "cannot write " + tmp.string());
    os << kMagic << '\n' << "header " << header.size() << '\n' << header << '\n';
    os << "tensors " << tensors.size() << '\n';
    for (const auto& [name, t] : tensors) {
      const auto nbytes = t.numel() * t.element_size();
      os << name << ' ' << dtype_name(t.scalar_type()) << ' ' << t.dim();
      for (auto d : t.sizes()) os << ' ' << d;
      os << ' ' << nbytes << '\n';
      os.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(nbytes));
      os << '\n';
    }
    os.flush();
    if (!os) throw Error("checkpoint", "write failed (disk full?) for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error("checkpoint", "cannot move archive into place at " + path.string() + ": " + ec.message());
}

TensorArchive TensorArchive::load(const std::filesystem::path& path) {
  const auto p = path.string();
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("checkpoint", "missing checkpoint " + p);
  std::string line;
  expect_line(is, p, line);
  if (line != kMagic) throw Error("checkpoint", p + " is not a checkpoint archive");

  TensorArchive a;
  std::size_t header_bytes = 0;
  expect_line(is, p, line);
  if (std::sscanf(line.c_str(), "header %zu", &header_bytes) != 1) {
    throw Error("checkpoint", "corrupt header line in " + p);
  }
  a.header.resize(header_bytes);
  is.read(a.header.data(), static_cast<std::streamsize>(header_bytes));
  expect_line(is, p, line);

  std::size_t count = 0;
  expect_line(is, p, line);
  if (std::sscanf(line.c_str(), "tensors %zu", &count) != 1) {
    throw Error("checkpoint", "corrupt tensor count in " + p);
  }
  for (std::size_t i = 0; i < count; ++i) {
    expect_line(is, p, line);
    std::istringstream ls(line);
    std::string name, dtype;
    int64_t ndim = 0;
    ls >> name >> dtype >> ndim;
    std::vector<int64_t> shape(static_cast<std::size_t>(std::max<int64_t>(ndim, 0)));
    for (auto& d : shape) ls >> d;
    int64_t nbytes = 0;
    ls >> nbytes;
    if (!ls || ndim < 0) throw Error("checkpoint", "corrupt record " + std::to_string(i) + " in " + p);
    auto t = torch::empty(shape, torch::TensorOptions().dtype(parse_dtype(dtype)));
    if (t.numel() * t.element_size() != nbytes) {
      throw Error("checkpoint", "size mismatch for " + name + " in " + p);
    }
    is.read(static_cast<char*>(t.data_ptr()), nbytes);
    expect_line(is, p, line);
    a.tensors.emplace_back(std::move(name), std::move(t));
  }
  return a;
}

void store_module(TensorArchive& archive, const std::string& prefix, const torch::nn::Module& module) {
  for (const auto& p : module.named_parameters()) archive.add(prefix + p.key(), p.value());
  for (const auto& b : module.named_buffers()) archive.add(prefix + b.key(), b.value());
}

void restore_module(const TensorArchive& archive, const std::string& prefix, torch::nn::Module& module) {
  torch::NoGradGuard guard;
  auto copy = [&](const std::string& key, torch::Tensor& dst) {
    const auto& src = archive.at(prefix + key);
    if (src.sizes() != dst.sizes() || src.scalar_type() != dst.scalar_type()) {
      throw Error("checkpoint", "tensor " + prefix + key + " has shape " + c10::str(src.sizes()) +
                                    ", model expects " + c10::str(dst.sizes()));
    }
    dst.copy_(src);
  };
  for (auto& p : module.named_parameters()) copy(p.key(), p.value());
  for (auto& b : module.named_buffers()) copy(b.key(), b.value());
}

}  // namespace scrl
