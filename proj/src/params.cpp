#include "m2v/params.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace m2v {

static_assert(std::endian::native == std::endian::little,
              "archive I/O assumes a little-endian host");

void ParamStore::add(const std::string& name, Matrix value) {
  if (index_.contains(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
  index_.emplace(name, entries_.size());
  names_.push_back(name);
  Matrix grad = Matrix::Zero(value.rows(), value.cols());
  entries_.push_back(Entry{std::move(value), std::move(grad)});
}

ParamStore::Entry& ParamStore::entry(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return entries_[it->second];
}

const ParamStore::Entry& ParamStore::entry(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return entries_[it->second];
}

Matrix& ParamStore::value(const std::string& name) { return entry(name).value; }
const Matrix& ParamStore::value(const std::string& name) const { return entry(name).value; }
Matrix& ParamStore::grad(const std::string& name) { return entry(name).grad; }
const Matrix& ParamStore::grad(const std::string& name) const { return entry(name).grad; }

std::size_t ParamStore::scalar_count() const {
  std::size_t total = 0;
  for (const auto& e : entries_) total += static_cast<std::size_t>(e.value.size());
  return total;
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.grad.setZero();
}

std::uint64_t ParamStore::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < names_.size(); ++i) {
    h = fnv1a({reinterpret_cast<const unsigned char*>(names_[i].data()), names_[i].size()}, h);
    h = hash_matrix(entries_[i].value, h);
  }
  return h;
}

void adam_step(ParamStore& params, AdamState& state) {
  for (const auto& name : params.names()) {
    const Matrix& g = params.grad(name);
    if (!g.allFinite()) {
      throw NumericalError("adam_step: non-finite gradient in '" + name + "' at step " +
                           std::to_string(state.step + 1));
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (const auto& name : params.names()) {
    Matrix& p = params.value(name);
    Matrix& g = params.grad(name);
    auto [mit, m_new] = state.m.try_emplace(name, Matrix::Zero(p.rows(), p.cols()));
    auto [vit, v_new] = state.v.try_emplace(name, Matrix::Zero(p.rows(), p.cols()));
    Matrix& m = mit->second;
    Matrix& v = vit->second;
    m = state.beta1 * m + (1.0 - state.beta1) * g;
    v = state.beta2 * v + (1.0 - state.beta2) * g.cwiseProduct(g);
    if (state.lr != 0.0) {
      p.array() -= state.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + state.eps);
    }
    g.setZero();
  }
}

const Matrix* Archive::find_tensor(const std::string& name) const {
  for (const auto& [k, v] : tensors) {
    if (k == name) return &v;
  }
  return nullptr;
}

const std::string* Archive::find_text(const std::string& name) const {
  for (const auto& [k, v] : texts) {
    if (k == name) return &v;
  }
  return nullptr;
}

namespace {

constexpr char kMagic[7] = {'M', '2', 'V', 'A', 'R', 'C', 'H'};
constexpr std::uint8_t kVersion = 1;

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_name(std::ostream& out, const std::string& name) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
}

class ByteReader {
 public:
  ByteReader(std::string bytes, std::filesystem::path path)
      : bytes_(std::move(bytes)), path_(std::move(path)) {}

  template <typename T>
  T get(const char* what) {
    T v;
    need(sizeof v, what);
    std::memcpy(&v, bytes_.data() + pos_, sizeof v);
    pos_ += sizeof v;
    return v;
  }

  std::string get_bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  [[noreturn]] void fail(const std::string& what) const {
    std::ostringstream os;
    os << path_.string() << ": " << what << " at byte offset " << pos_;
    throw DataError(os.str());
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      std::ostringstream os;
      os << "truncated archive while reading " << what << " (need " << n << " bytes, "
         << bytes_.size() - pos_ << " left)";
      fail(os.str());
    }
  }

  std::string bytes_;
  std::filesystem::path path_;
  std::size_t pos_ = 0;
};

}  // namespace

void write_archive(const std::filesystem::path& path, const Archive& archive) {
  // Written to a sibling temp file first so a crash never leaves a half archive in place.
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write " + tmp.string());
    out.write(kMagic, sizeof kMagic);
    put<std::uint8_t>(out, kVersion);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(archive.tensors.size() + archive.texts.size()));
    for (const auto& [name, m] : archive.tensors) {
      put<std::uint8_t>(out, 0);
      put_name(out, name);
      put<std::uint64_t>(out, static_cast<std::uint64_t>(m.rows()));
      put<std::uint64_t>(out, static_cast<std::uint64_t>(m.cols()));
      out.write(reinterpret_cast<const char*>(m.data()),
                static_cast<std::streamsize>(m.size() * sizeof(double)));
    }
    for (const auto& [name, text] : archive.texts) {
      put<std::uint8_t>(out, 1);
      put_name(out, name);
      put<std::uint64_t>(out, text.size());
      out.write(text.data(), static_cast<std::streamsize>(text.size()));
    }
    if (!out) throw DataError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Archive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  ByteReader r(ss.str(), path);

  if (r.get_bytes(sizeof kMagic, "magic") != std::string(kMagic, sizeof kMagic)) {
    r.fail("bad magic header");
  }
  const auto version = r.get<std::uint8_t>("version");
  if (version != kVersion) r.fail("unsupported archive version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>("entry count");

  Archive a;
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto kind = r.get<std::uint8_t>("entry kind");
    const auto name_len = r.get<std::uint32_t>("name length");
    if (name_len > (1u << 16)) r.fail("implausible name length");
    std::string name = r.get_bytes(name_len, "name");
    if (kind == 0) {
      const auto rows = r.get<std::uint64_t>("rows");
      const auto cols = r.get<std::uint64_t>("cols");
      if (rows > (1ull << 32) || cols > (1ull << 32)) r.fail("implausible tensor shape");
      std::string raw = r.get_bytes(rows * cols * sizeof(double), "tensor values");
      Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
      if (!raw.empty()) std::memcpy(m.data(), raw.data(), raw.size());
      a.tensors.emplace_back(std::move(name), std::move(m));
    } else if (kind == 1) {
      const auto len = r.get<std::uint64_t>("text length");
      a.texts.emplace_back(std::move(name), r.get_bytes(len, "text"));
    } else {
      r.fail("unknown entry kind " + std::to_string(kind));
    }
  }
  if (!r.done()) r.fail("trailing bytes after last entry");
  return a;
}

}  // namespace m2v
