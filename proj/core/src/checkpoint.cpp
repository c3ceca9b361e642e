#include "anytraj/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace anytraj::ckpt {

namespace {
constexpr char kMagic[4] = {'A', 'T', 'C', 'K'};
constexpr uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
template <typename T>
T read_pod(std::istream& is) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}
}  // namespace

void save_checkpoint(const std::filesystem::path& path,
                     const nlohmann::json& config,
                     const nn::NamedParams& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string());
  os.write(kMagic, 4);
  write_pod(os, kVersion);
  std::string cfg = config.dump();
  write_pod(os, static_cast<uint32_t>(cfg.size()));
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  write_pod(os, static_cast<uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    write_pod(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod(os, static_cast<uint32_t>(t.shape().size()));
    for (int64_t d : t.shape()) write_pod(os, d);
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.data().size() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("bad checkpoint magic in " + path.string());
  if (read_pod<uint32_t>(is) != kVersion)
    throw std::runtime_error("unsupported checkpoint version");
  Checkpoint ck;
  uint32_t cfg_len = read_pod<uint32_t>(is);
  std::string cfg(cfg_len, '\0');
  is.read(cfg.data(), cfg_len);
  ck.config = nlohmann::json::parse(cfg);
  uint32_t count = read_pod<uint32_t>(is);
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t name_len = read_pod<uint32_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    uint32_t ndim = read_pod<uint32_t>(is);
    nn::Shape shape(ndim);
    for (auto& d : shape) d = read_pod<int64_t>(is);
    std::vector<double> data(static_cast<size_t>(nn::numel(shape)));
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(double)));
    ck.arrays.emplace_back(std::move(name),
                           nn::Tensor::from(std::move(shape), std::move(data)));
  }
  if (!is) throw std::runtime_error("truncated checkpoint: " + path.string());
  return ck;
}

void load_into(nn::NamedParams& params, const Checkpoint& ck) {
  std::map<std::string, const nn::Tensor*> index;
  for (const auto& [name, t] : ck.arrays) index[name] = &t;
  for (auto& [name, p] : params) {
    auto it = index.find(name);
    if (it == index.end())
      throw std::runtime_error("checkpoint missing parameter: " + name);
    if (it->second->shape() != p.shape())
      throw std::runtime_error("checkpoint shape mismatch for " + name);
    p.data() = it->second->data();
  }
}

}  // namespace anytraj::ckpt
