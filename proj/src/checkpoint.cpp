#include <agnocomm/checkpoint.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace agnocomm {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'A', 'G', 'N', 'O'};

template <class T>
void put(std::vector<unsigned char>& out, T value) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.insert(out.end(), buf, buf + sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::span<const unsigned char> bytes) : bytes_(bytes) {}

  template <class T>
  T get() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  std::string get_string(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw ConfigError("checkpoint: truncated file");
  }

  std::span<const unsigned char> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::uint64_t Tensor::element_count() const {
  std::uint64_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

std::vector<unsigned char> encode_checkpoint(std::span<const Tensor> tensors) {
  std::vector<unsigned char> out(std::begin(kMagic), std::end(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.element_count() != t.values.size()) {
      throw ConfigError("checkpoint: tensor '" + t.name + "' payload does not match its dims");
    }
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) put<std::uint64_t>(out, d);
  }
  for (const auto& t : tensors) {
    for (double v : t.values) put<double>(out, v);
  }
  return out;
}

std::vector<Tensor> decode_checkpoint(std::span<const unsigned char> bytes) {
  Reader r(bytes);
  if (r.get_string(4) != std::string(kMagic, 4)) throw ConfigError("checkpoint: bad magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw ConfigError("checkpoint: unsupported format version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>();
  std::vector<Tensor> tensors(count);
  for (auto& t : tensors) {
    const auto name_len = r.get<std::uint32_t>();
    t.name = r.get_string(name_len);
    const auto rank = r.get<std::uint32_t>();
    t.dims.resize(rank);
    for (auto& d : t.dims) d = r.get<std::uint64_t>();
  }
  for (auto& t : tensors) {
    t.values.resize(t.element_count());
    for (auto& v : t.values) v = r.get<double>();
  }
  if (!r.at_end()) throw ConfigError("checkpoint: trailing bytes");
  return tensors;
}

void write_checkpoint(const std::filesystem::path& path, std::span<const Tensor> tensors) {
  const auto bytes = encode_checkpoint(tensors);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ConfigError("write failed for '" + path.string() + "'");
}

std::vector<Tensor> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint '" + path.string() + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

Tensor to_tensor(const std::string& name, const Matrix& m) {
  Tensor t{name, {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())}, {}};
  t.values.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) t.values.push_back(m(r, c));
  }
  return t;
}

Tensor to_tensor(const std::string& name, const Vector& v) {
  return Tensor{name, {static_cast<std::uint64_t>(v.size())}, std::vector<double>(v.data(), v.data() + v.size())};
}

void assign_from(const Tensor& t, Matrix& m) {
  if (t.dims.size() != 2 || t.dims[0] != static_cast<std::uint64_t>(m.rows()) ||
      t.dims[1] != static_cast<std::uint64_t>(m.cols())) {
    throw ConfigError("checkpoint: tensor '" + t.name + "' has the wrong shape");
  }
  std::size_t k = 0;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = t.values[k++];
  }
}

void assign_from(const Tensor& t, Vector& v) {
  if (t.dims.size() != 1 || t.dims[0] != static_cast<std::uint64_t>(v.size())) {
    throw ConfigError("checkpoint: tensor '" + t.name + "' has the wrong shape");
  }
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = t.values[static_cast<std::size_t>(i)];
}

const Tensor& find_tensor(std::span<const Tensor> tensors, const std::string& name) {
  for (const auto& t : tensors) {
    if (t.name == name) return t;
  }
  throw ConfigError("checkpoint: missing tensor '" + name + "'");
}

}  // namespace agnocomm
