#include "cotmae/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace cotmae {

namespace {

static_assert(sizeof(float) == 4 && sizeof(double) == 8);

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename T>
void put_values(std::string& out, const nn::Tensor<T>& t) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  for (T v : t.values()) {
    U bits;
    std::memcpy(&bits, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
    }
  }
}

class Cursor {
 public:
  Cursor(const std::string& data, const std::filesystem::path& path)
      : data_(data), path_(path.string()) {}

  const char* take(std::size_t n) {
    if (data_.size() - pos_ < n) {
      throw std::runtime_error("checkpoint " + path_ + " is truncated at byte " +
                               std::to_string(pos_));
    }
    const char* p = data_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint64_t uint(std::size_t bytes) {
    const auto* p = reinterpret_cast<const unsigned char*>(take(bytes));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
  }
  bool done() const { return pos_ == data_.size(); }
  const std::string& path() const { return path_; }

 private:
  const std::string& data_;
  std::string path_;
  std::size_t pos_ = 0;
};

template <typename From, typename To>
void decode_values(const std::vector<char>& bytes, nn::Tensor<To>& dst) {
  using U = std::conditional_t<sizeof(From) == 4, std::uint32_t, std::uint64_t>;
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  for (std::size_t i = 0; i < dst.size(); ++i) {
    U bits = 0;
    for (std::size_t b = 0; b < sizeof(From); ++b) {
      bits |= static_cast<U>(p[i * sizeof(From) + b]) << (8 * b);
    }
    From v;
    std::memcpy(&v, &bits, sizeof(From));
    dst[i] = static_cast<To>(v);
  }
}

}  // namespace

template <>
std::string dtype_name<float>() {
  return "f32";
}
template <>
std::string dtype_name<double>() {
  return "f64";
}

template <typename T>
void write_checkpoint(const std::filesystem::path& path, json meta,
                      const std::vector<NamedTensor<T>>& tensors) {
  meta["dtype"] = dtype_name<T>();
  const std::string header = meta.dump();
  std::string out(kCheckpointMagic, 6);
  put_u32(out, kCheckpointVersion);
  put_u64(out, header.size());
  out += header;
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& nt : tensors) {
    put_u32(out, static_cast<std::uint32_t>(nt.name.size()));
    out += nt.name;
    put_u32(out, static_cast<std::uint32_t>(nt.tensor->rank()));
    for (auto d : nt.tensor->shape()) put_u32(out, static_cast<std::uint32_t>(d));
    put_values(out, *nt.tensor);
  }
  auto tmp = path;
  tmp += ".tmp";
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write checkpoint " + tmp.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw std::runtime_error("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

const RawTensor* RawCheckpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

template <typename T>
void RawCheckpoint::load(const std::string& name, nn::Tensor<T>& dst) const {
  const RawTensor* t = find(name);
  if (t == nullptr) throw std::runtime_error("checkpoint has no tensor '" + name + "'");
  if (t->shape != dst.shape()) {
    throw std::runtime_error("shape mismatch for tensor '" + name + "': checkpoint " +
                             nn::shape_string(t->shape) + " vs model " +
                             nn::shape_string(dst.shape()));
  }
  if (dtype == "f32") {
    decode_values<float>(t->bytes, dst);
  } else {
    decode_values<double>(t->bytes, dst);
  }
}

RawCheckpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path.string());
  const std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (data.size() < 6 || data.compare(0, 6, kCheckpointMagic) != 0) {
    throw std::runtime_error("bad magic in checkpoint " + path.string());
  }
  Cursor c(data, path);
  c.take(6);
  const auto version = c.uint(4);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version) +
                             " in " + path.string());
  }
  const auto header_len = c.uint(8);
  const char* header = c.take(header_len);
  RawCheckpoint ck;
  try {
    ck.meta = json::parse(header, header + header_len);
  } catch (const json::exception& e) {
    throw std::runtime_error("corrupt checkpoint header in " + path.string() + ": " + e.what());
  }
  ck.dtype = ck.meta.value("dtype", std::string());
  if (ck.dtype != "f32" && ck.dtype != "f64") {
    throw std::runtime_error("checkpoint " + path.string() + " has unknown dtype '" + ck.dtype +
                             "'");
  }
  const std::size_t elem = ck.dtype == "f32" ? 4 : 8;
  const auto count = c.uint(4);
  ck.tensors.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    RawTensor t;
    const auto name_len = c.uint(4);
    t.name.assign(c.take(name_len), name_len);
    const auto rank = c.uint(4);
    std::size_t n = 1;
    for (std::uint64_t r = 0; r < rank; ++r) {
      t.shape.push_back(c.uint(4));
      n *= t.shape.back();
    }
    const char* p = c.take(n * elem);
    t.bytes.assign(p, p + n * elem);
    ck.tensors.push_back(std::move(t));
  }
  if (!c.done()) throw std::runtime_error("trailing bytes in checkpoint " + path.string());
  return ck;
}

template void write_checkpoint(const std::filesystem::path&, json,
                               const std::vector<NamedTensor<float>>&);
template void write_checkpoint(const std::filesystem::path&, json,
                               const std::vector<NamedTensor<double>>&);
template void RawCheckpoint::load(const std::string&, nn::Tensor<float>&) const;
template void RawCheckpoint::load(const std::string&, nn::Tensor<double>&) const;

}  // namespace cotmae
