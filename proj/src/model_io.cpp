// Versioned binary model file; layout documented in docs/formats.md.

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "tsad/error.hpp"
#include "tsad/student.hpp"

namespace tsad {

namespace {

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int b = 0; b < 4; ++b) bytes_.push_back(static_cast<char>((v >> (8 * b)) & 0xFFu));
  }
  void u64(std::uint64_t v) {
    for (int b = 0; b < 8; ++b) bytes_.push_back(static_cast<char>((v >> (8 * b)) & 0xFFu));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void raw(const char* p, std::size_t n) { bytes_.insert(bytes_.end(), p, p + n); }
  const std::vector<char>& bytes() const { return bytes_; }

 private:
  std::vector<char> bytes_;
};

class Reader {
 public:
  Reader(std::vector<unsigned char> bytes, std::string where)
      : bytes_(std::move(bytes)), where_(std::move(where)) {}

  std::uint64_t uint(int width) {
    need(width);
    std::uint64_t v = 0;
    for (int b = 0; b < width; ++b) v |= std::uint64_t{bytes_[pos_ + b]} << (8 * b);
    pos_ += width;
    return v;
  }
  std::uint32_t u32() { return static_cast<std::uint32_t>(uint(4)); }
  std::uint64_t u64() { return uint(8); }
  double f64() { return std::bit_cast<double>(u64()); }
  float f32() { return std::bit_cast<float>(u32()); }
  bool at_end() const { return pos_ == bytes_.size(); }
  const unsigned char* peek(std::size_t n) {
    need(n);
    return bytes_.data() + pos_;
  }

 private:
  void need(std::size_t n) {
    if (pos_ + n > bytes_.size()) throw FormatError("truncated payload", where_);
  }
  std::vector<unsigned char> bytes_;
  std::string where_;
  std::size_t pos_ = 0;
};

void write_net(Writer& w, const StudentF& net) {
  const auto& p = net.params;
  w.u32(static_cast<std::uint32_t>(p.d_in()));
  w.u32(static_cast<std::uint32_t>(p.units()));
  w.u32(static_cast<std::uint32_t>(p.d_out()));
  p.for_each_block([&](const char*, const float* d, Eigen::Index n) {
    for (Eigen::Index i = 0; i < n; ++i) w.f32(d[i]);
  });
}

StudentF read_net(Reader& r, const std::string& where) {
  const auto d_in = r.u32();
  const auto units = r.u32();
  const auto d_out = r.u32();
  if (d_in == 0 || units == 0 || d_out == 0 || d_in > (1u << 16) || units > (1u << 16) ||
      d_out > (1u << 16)) {
    throw FormatError("corrupt model", where + ": implausible layer sizes");
  }
  auto p = MlpParams<float>::zeros(d_in, units, d_out);
  p.for_each_block([&](const char* name, float* d, Eigen::Index n) {
    for (Eigen::Index i = 0; i < n; ++i) {
      d[i] = r.f32();
      if (!std::isfinite(d[i])) {
        throw FormatError("corrupt model", where + ": non-finite value in " + name);
      }
    }
  });
  return StudentF::from_params(std::move(p));
}

}  // namespace

void save_model(const StudentPair& model, const fs::path& path) {
  const TrainConfig& c = model.config;
  Writer w;
  w.raw(kModelMagic, 4);
  w.u32(kModelFormatVersion);
  w.u32(c.layer_pair.j);
  w.u32(c.layer_pair.k);
  w.u32(c.epochs);
  w.f64(c.learning_rate);
  w.u32(c.loss_distance == Distance::kCosine ? 0 : 1);
  w.u32(c.loss_reduction == LossReduction::kMean ? 0 : 1);
  w.u64(c.seed);
  w.f64(c.beta1);
  w.f64(c.beta2);
  w.f64(c.adam_eps);
  w.u32(c.hidden_units);
  write_net(w, model.forward_net);
  write_net(w, model.backward_net);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
  if (!out) throw DataError("write failed: " + path.string());
}

StudentPair load_model(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open model " + path.string());
  std::vector<unsigned char> bytes(std::istreambuf_iterator<char>(in), {});
  const std::string where = path.string();
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kModelMagic, 4) != 0) {
    throw FormatError("bad magic", where);
  }
  Reader r(std::move(bytes), where);
  r.peek(4);
  r.u32();  // magic
  const std::uint32_t version = r.u32();
  if (version != kModelFormatVersion) {
    throw FormatError("unsupported version", where + ": version " + std::to_string(version));
  }
  StudentPair m;
  TrainConfig& c = m.config;
  c.layer_pair.j = r.u32();
  c.layer_pair.k = r.u32();
  c.epochs = r.u32();
  c.learning_rate = r.f64();
  const auto dist = r.u32();
  const auto reduction = r.u32();
  if (dist > 1 || reduction > 1) throw FormatError("corrupt model", where + ": bad enum");
  c.loss_distance = dist == 0 ? Distance::kCosine : Distance::kL2;
  c.loss_reduction = reduction == 0 ? LossReduction::kMean : LossReduction::kSum;
  c.seed = r.u64();
  c.beta1 = r.f64();
  c.beta2 = r.f64();
  c.adam_eps = r.f64();
  c.hidden_units = r.u32();
  m.forward_net = read_net(r, where);
  m.backward_net = read_net(r, where);
  if (!r.at_end()) throw FormatError("trailing bytes", where);
  if (m.forward_net.params.d_in() != m.backward_net.params.d_out() ||
      m.forward_net.params.d_out() != m.backward_net.params.d_in()) {
    throw FormatError("corrupt model", where + ": student dimensions are inconsistent");
  }
  return m;
}

}  // namespace tsad
