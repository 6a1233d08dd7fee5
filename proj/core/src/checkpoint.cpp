#include "dchat/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace dchat {

namespace {

constexpr char kMagic[8] = {'D', 'C', 'H', 'A', 'T', 'C', 'K', 'P'};

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

void put_str(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

std::string get_str(std::istream& is) {
  const auto n = get<std::uint32_t>(is);
  std::string s(n, '\0');
  if (n > 0 && !is.read(s.data(), n)) throw std::runtime_error("checkpoint: truncated string");
  return s;
}

}  // namespace

void Checkpoint::store(const nn::ParamList& params) {
  for (const auto* p : params) {
    if (!arrays.emplace(p->name, p->value).second) {
      throw std::logic_error("checkpoint: duplicate parameter name " + p->name);
    }
  }
}

void Checkpoint::restore(const nn::ParamList& params) const {
  for (auto* p : params) {
    auto it = arrays.find(p->name);
    if (it == arrays.end()) throw std::runtime_error("checkpoint: missing parameter " + p->name);
    if (it->second.rows() != p->value.rows() || it->second.cols() != p->value.cols()) {
      throw std::runtime_error("checkpoint: shape mismatch for " + p->name);
    }
    p->value = it->second;
    p->zero_grad();
  }
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
  os.write(kMagic, sizeof kMagic);
  put<std::uint32_t>(os, Checkpoint::kVersion);
  put_str(os, ckpt.kind);
  put_str(os, ckpt.config.dump());
  put<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.vocab.size()));
  for (const auto& tok : ckpt.vocab) put_str(os, tok);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.arrays.size()));
  for (const auto& [name, m] : ckpt.arrays) {
    put_str(os, name);
    put<std::int64_t>(os, m.rows());
    put<std::int64_t>(os, m.cols());
    os.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * m.size()));
  }
  if (!os) throw std::runtime_error("write failed for checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[8];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw std::runtime_error("not a checkpoint file: " + path.string());
  }
  const auto version = get<std::uint32_t>(is);
  if (version != Checkpoint::kVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  ckpt.kind = get_str(is);
  ckpt.config = nlohmann::json::parse(get_str(is));
  const auto nv = get<std::uint32_t>(is);
  ckpt.vocab.reserve(nv);
  for (std::uint32_t i = 0; i < nv; ++i) ckpt.vocab.push_back(get_str(is));
  const auto na = get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < na; ++i) {
    std::string name = get_str(is);
    const auto rows = get<std::int64_t>(is);
    const auto cols = get<std::int64_t>(is);
    if (rows < 0 || cols < 0) throw std::runtime_error("checkpoint: negative shape");
    ad::Matrix m(rows, cols);
    if (m.size() > 0 &&
        !is.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * m.size()))) {
      throw std::runtime_error("checkpoint: truncated array " + name);
    }
    ckpt.arrays.emplace(std::move(name), std::move(m));
  }
  return ckpt;
}

}  // namespace dchat
