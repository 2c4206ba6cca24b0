#include "mhfilm/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace mhfilm::checkpoint {

namespace {

constexpr char kMagic[4] = {'M', 'H', 'F', 'M'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 8);
}

void put_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(os, bits);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) {
    throw CheckpointError("checkpoint truncated");
  }
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) {
    throw CheckpointError("checkpoint truncated");
  }
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

double get_f64(std::istream& is) {
  const std::uint64_t bits = get_u64(is);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

}  // namespace

void save(const std::string& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  os.write(kMagic, 4);
  put_u32(os, kVersion);
  put_u32(os, static_cast<std::uint32_t>(tensors.size()));
  for (const NamedTensor& t : tensors) {
    put_u32(os, static_cast<std::uint32_t>(t.name.size()));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put_u32(os, static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t d : t.shape) put_u64(os, d);
    for (double v : t.data) put_f64(os, v);
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

std::vector<NamedTensor> load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw CheckpointError("bad checkpoint magic in " + path);
  }
  const std::uint32_t version = get_u32(is);
  if (version != kVersion) {
    throw CheckpointError("unsupported checkpoint version " +
                          std::to_string(version));
  }
  const std::uint32_t count = get_u32(is);
  std::vector<NamedTensor> tensors;
  tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const std::uint32_t name_len = get_u32(is);
    t.name.resize(name_len);
    if (!is.read(t.name.data(), name_len)) {
      throw CheckpointError("checkpoint truncated");
    }
    const std::uint32_t rank = get_u32(is);
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      t.shape.push_back(static_cast<std::size_t>(get_u64(is)));
      numel *= t.shape.back();
    }
    t.data.resize(numel);
    for (std::size_t j = 0; j < numel; ++j) t.data[j] = get_f64(is);
    tensors.push_back(std::move(t));
  }
  return tensors;
}

void save_model(const std::string& path, film::Model& model,
                train::Adam* adam) {
  std::vector<NamedTensor> tensors;
  for (const auto& e : model.params().entries) {
    tensors.push_back({e.name, e.tensor.shape(), e.tensor.values()});
  }
  for (const auto& [name, vec] : model.state_vectors()) {
    tensors.push_back({"state." + name, Shape{vec->size()}, *vec});
  }
  if (adam) {
    for (const auto& [name, vec] : adam->state_vectors()) {
      tensors.push_back({name, Shape{vec->size()}, *vec});
    }
    tensors.push_back(
        {"opt.t", Shape{1}, {static_cast<double>(adam->steps())}});
  }
  save(path, tensors);
}

void load_model(const std::string& path, film::Model& model,
                train::Adam* adam) {
  const std::vector<NamedTensor> tensors = load(path);
  std::vector<bool> used(tensors.size(), false);
  const auto find = [&](const std::string& name) -> const NamedTensor* {
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      if (tensors[i].name == name) {
        used[i] = true;
        return &tensors[i];
      }
    }
    return nullptr;
  };
  const auto fetch = [&](const std::string& name, const Shape& expect,
                         std::vector<double>& dst) {
    const NamedTensor* t = find(name);
    if (!t) throw CheckpointError("checkpoint is missing tensor " + name);
    if (t->shape != expect) {
      throw CheckpointError("tensor " + name + " has shape " +
                            shape_str(t->shape) + " in checkpoint but " +
                            shape_str(expect) + " in the model");
    }
    dst = t->data;
  };
  for (auto& e : model.params().entries) {
    fetch(e.name, e.tensor.shape(), e.tensor.values());
  }
  for (auto& [name, vec] : model.state_vectors()) {
    fetch("state." + name, Shape{vec->size()}, *vec);
  }
  if (adam) {
    for (auto& [name, vec] : adam->state_vectors()) {
      fetch(name, Shape{vec->size()}, *vec);
    }
    std::vector<double> t;
    fetch("opt.t", Shape{1}, t);
    adam->set_steps(static_cast<std::uint64_t>(t[0]));
  }
  // a compatible checkpoint contains exactly the model's tensors; leftovers
  // mean the architectures differ
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (used[i]) continue;
    const bool optimizer_extra = tensors[i].name.rfind("opt.", 0) == 0;
    if (optimizer_extra && !adam) continue;  // evaluation ignores moments
    throw CheckpointError("checkpoint tensor " + tensors[i].name +
                          " has no counterpart in the model");
  }
}

}  // namespace mhfilm::checkpoint
