#include "acflow/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>

#include "acflow/error.hpp"

namespace acflow {

namespace {

class Writer {
 public:
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.append(s);
  }
  void raw(std::string_view s) { out_.append(s); }
  std::string take() { return std::move(out_); }

 private:
  void put(std::uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view in) : in_(in) {}

  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  double f64() { return std::bit_cast<double>(get(8)); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(in_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::string_view raw(std::size_t n) {
    need(n);
    const auto s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const noexcept { return pos_ == in_.size(); }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw LoadError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  std::uint64_t get(int bytes) {
    need(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
    }
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }

  std::string_view in_;
  std::size_t pos_ = 0;
};

void write_tensor(Writer& w, const std::string& name, const ad::Tensor& t) {
  w.str(name);
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) w.u64(d);
  for (double v : t.values()) w.f64(v);
}

}  // namespace

std::string serialize_checkpoint(const AcflowModel& model, const CheckpointMeta& meta) {
  Writer w;
  w.raw("ACFW");
  w.u32(checkpoint_version);
  w.str(model.architecture().to_string());
  w.str(mode_name(model.mode()));
  w.str(meta.config_digest);
  w.u64(meta.epoch);
  w.f64(meta.best_valid);
  w.u32(static_cast<std::uint32_t>(meta.names.size()));
  for (const auto& n : meta.names) w.str(n);
  const auto& params = model.parameters();
  w.u32(static_cast<std::uint32_t>(params.size() + 2));
  for (std::size_t i = 0; i < params.size(); ++i) write_tensor(w, params.at(i).name, params.value(i));
  write_tensor(w, "standardizer.mean", ad::Tensor::vector(model.standardizer().mean()));
  write_tensor(w, "standardizer.std", ad::Tensor::vector(model.standardizer().std()));
  return w.take();
}

LoadedCheckpoint deserialize_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  if (bytes.size() < 4 || r.raw(4) != "ACFW") throw LoadError("not a checkpoint (bad magic bytes)");
  const std::uint32_t version = r.u32();
  if (version != checkpoint_version) {
    throw LoadError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                    std::to_string(checkpoint_version) + ")");
  }
  const std::string arch_text = r.str();
  const std::string mode_text = r.str();
  LoadedCheckpoint out;
  out.meta.config_digest = r.str();
  out.meta.epoch = r.u64();
  out.meta.best_valid = r.f64();
  const std::uint32_t n_names = r.u32();
  for (std::uint32_t i = 0; i < n_names; ++i) out.meta.names.push_back(r.str());

  Architecture arch;
  try {
    arch = Architecture::parse(arch_text);
    out.model = AcflowModel::create(arch, 0);
    out.model.set_mode(parse_mode(mode_text));
  } catch (const ParseError& e) {
    throw LoadError(std::string("checkpoint header: ") + e.what());
  }

  std::map<std::string, ad::Tensor> tensors;
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const std::uint32_t rank = r.u32();
    if (rank > 2) throw LoadError("tensor '" + name + "' has rank " + std::to_string(rank));
    ad::Shape shape;
    std::uint64_t size = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      shape.push_back(r.u64());
      size *= shape.back();
    }
    if (size > bytes.size() / 8) throw LoadError("tensor '" + name + "' larger than the file");
    std::vector<double> data(size);
    for (double& v : data) v = r.f64();
    tensors.emplace(std::move(name), ad::Tensor(std::move(shape), std::move(data)));
  }
  if (!r.done()) throw LoadError("trailing bytes after checkpoint tensors");

  if (!out.meta.names.empty() && out.meta.names.size() != arch.dim) {
    throw LoadError("checkpoint names " + std::to_string(out.meta.names.size()) +
                    " columns for a " + std::to_string(arch.dim) + "-dim model");
  }
  auto& params = out.model.parameters();
  if (tensors.size() != params.size() + 2) {
    throw LoadError("checkpoint holds " + std::to_string(tensors.size()) + " tensors, architecture needs " +
                    std::to_string(params.size() + 2));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto it = tensors.find(params.at(i).name);
    if (it == tensors.end()) throw LoadError("checkpoint lacks parameter '" + params.at(i).name + "'");
    if (it->second.shape() != params.value(i).shape()) {
      throw LoadError("parameter '" + params.at(i).name + "' has shape " +
                      ad::shape_string(it->second.shape()) + ", expected " +
                      ad::shape_string(params.value(i).shape()));
    }
    params.value(i) = it->second;
  }
  const auto mean = tensors.find("standardizer.mean");
  const auto std = tensors.find("standardizer.std");
  if (mean == tensors.end() || std == tensors.end()) throw LoadError("checkpoint lacks standardizer");
  try {
    const auto mv = mean->second.values();
    const auto sv = std->second.values();
    out.model.set_standardizer(
        Standardizer({mv.begin(), mv.end()}, {sv.begin(), sv.end()}));
  } catch (const std::invalid_argument& e) {
    throw LoadError(std::string("checkpoint standardizer: ") + e.what());
  }
  return out;
}

void save_checkpoint(const AcflowModel& model, const CheckpointMeta& meta,
                     const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(model, meta);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing checkpoint '" + path.string() + "'");
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint '" + path.string() + "'");
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace acflow
