#include "xlst/io.hpp"

#include <openssl/evp.h>
#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "xlst/error.hpp"

namespace xlst {

namespace fs = std::filesystem;

namespace {

constexpr char magic[8] = {'X', 'L', 'S', 'T', 'T', 'N', 'S', 'R'};

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename U>
U get_le(const char* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

std::uint32_t crc32_of(const char* data, std::size_t n) {
  return static_cast<std::uint32_t>(crc32_z(0L, reinterpret_cast<const Bytef*>(data), n));
}

std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::i64: return 8;
    case DType::u8: return 1;
  }
  throw FormatError("unknown dtype tag");
}

bool valid_dtype(std::uint8_t tag) { return tag >= 1 && tag <= 4; }

std::uint64_t element_count(const std::vector<std::uint64_t>& shape) {
  std::uint64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

// Bounds-checked reader over the container body.
class Reader {
 public:
  Reader(const std::string& bytes, std::size_t end, const std::string& origin)
      : bytes_(bytes), end_(end), origin_(origin) {}

  const char* take(std::size_t n) {
    if (n > end_ - pos_) throw FormatError(origin_ + ": record runs past the end of the container");
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  template <typename U>
  U get() {
    return get_le<U>(take(sizeof(U)));
  }
  bool done() const { return pos_ == end_; }
  void seek(std::size_t pos) { pos_ = pos; }

 private:
  const std::string& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
  const std::string& origin_;
};

template <typename Scalar>
constexpr DType dtype_of() {
  return std::is_same_v<Scalar, float> ? DType::f32 : DType::f64;
}

}  // namespace

const char* dtype_name(DType t) {
  switch (t) {
    case DType::f32: return "f32";
    case DType::f64: return "f64";
    case DType::i64: return "i64";
    case DType::u8: return "u8";
  }
  return "?";
}

std::string encode_container(const std::vector<TensorRecord>& records) {
  std::string out(magic, sizeof(magic));
  put_le<std::uint32_t>(out, container_version);
  put_le<std::uint64_t>(out, records.size());
  for (const auto& r : records) {
    if (r.payload.size() != element_count(r.shape) * dtype_size(r.dtype)) {
      throw FormatError("tensor '" + r.name + "': payload size does not match its shape");
    }
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(r.name.size()));
    out += r.name;
    out.push_back(static_cast<char>(r.dtype));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(r.shape.size()));
    for (auto d : r.shape) put_le<std::uint64_t>(out, d);
    put_le<std::uint64_t>(out, r.payload.size());
    out += r.payload;
  }
  put_le<std::uint32_t>(out, crc32_of(out.data(), out.size()));
  return out;
}

std::vector<TensorRecord> decode_container(const std::string& bytes, const std::string& origin) {
  if (bytes.size() >= sizeof(magic) && std::memcmp(bytes.data(), magic, sizeof(magic)) != 0) {
    throw FormatError(origin + ": not a tensor container (bad magic)");
  }
  if (bytes.size() < sizeof(magic) + 4) throw ChecksumError(origin + ": truncated container");
  const auto version = get_le<std::uint32_t>(bytes.data() + sizeof(magic));
  if (version != container_version) {
    throw VersionError(origin + ": container format version " + std::to_string(version) +
                       " cannot be read by this build, which reads version " + std::to_string(container_version));
  }
  if (bytes.size() < sizeof(magic) + 4 + 8 + 4) throw ChecksumError(origin + ": truncated container");
  const std::size_t body = bytes.size() - 4;
  const auto stored = get_le<std::uint32_t>(bytes.data() + body);
  if (stored != crc32_of(bytes.data(), body)) {
    throw ChecksumError(origin + ": checksum mismatch (file is truncated or corrupt)");
  }

  Reader in(bytes, body, origin);
  in.seek(sizeof(magic) + 4);
  const auto count = in.get<std::uint64_t>();
  std::vector<TensorRecord> records;
  for (std::uint64_t i = 0; i < count; ++i) {
    TensorRecord r;
    const auto name_len = in.get<std::uint32_t>();
    r.name.assign(in.take(name_len), name_len);
    const auto tag = in.get<std::uint8_t>();
    if (!valid_dtype(tag)) throw FormatError(origin + ": tensor '" + r.name + "' has unknown dtype tag");
    r.dtype = static_cast<DType>(tag);
    const auto rank = in.get<std::uint32_t>();
    for (std::uint32_t k = 0; k < rank; ++k) r.shape.push_back(in.get<std::uint64_t>());
    const auto len = in.get<std::uint64_t>();
    if (len != element_count(r.shape) * dtype_size(r.dtype)) {
      throw FormatError(origin + ": tensor '" + r.name + "' payload size does not match its shape");
    }
    r.payload.assign(in.take(len), len);
    records.push_back(std::move(r));
  }
  if (!in.done()) throw FormatError(origin + ": trailing bytes after the last tensor");
  return records;
}

void write_file_atomic(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open " + tmp.string() + " for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw Error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_container(const fs::path& path, const std::vector<TensorRecord>& records) {
  write_file_atomic(path, encode_container(records));
}

std::vector<TensorRecord> read_container(const fs::path& path) {
  return decode_container(read_file(path), path.string());
}

template <typename Scalar>
TensorRecord matrix_record(const std::string& name, const Matrix<Scalar>& m) {
  using Bits = std::conditional_t<std::is_same_v<Scalar, float>, std::uint32_t, std::uint64_t>;
  TensorRecord r{name, dtype_of<Scalar>(), {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())}, {}};
  r.payload.reserve(static_cast<std::size_t>(m.size()) * sizeof(Scalar));
  // Matrix is row-major, so data() is already in row order.
  for (Eigen::Index i = 0; i < m.size(); ++i) put_le<Bits>(r.payload, std::bit_cast<Bits>(m.data()[i]));
  return r;
}

template <typename Scalar>
Matrix<Scalar> record_matrix(const TensorRecord& r) {
  using Bits = std::conditional_t<std::is_same_v<Scalar, float>, std::uint32_t, std::uint64_t>;
  if (r.dtype != dtype_of<Scalar>()) {
    throw FormatError("tensor '" + r.name + "' is " + dtype_name(r.dtype) + ", expected " +
                      dtype_name(dtype_of<Scalar>()));
  }
  if (r.shape.size() != 2) throw FormatError("tensor '" + r.name + "' is not 2-D");
  Matrix<Scalar> m(static_cast<Eigen::Index>(r.shape[0]), static_cast<Eigen::Index>(r.shape[1]));
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = std::bit_cast<Scalar>(get_le<Bits>(r.payload.data() + static_cast<std::size_t>(i) * sizeof(Scalar)));
  }
  return m;
}

TensorRecord int_record(const std::string& name, const std::vector<std::int64_t>& values) {
  TensorRecord r{name, DType::i64, {values.size()}, {}};
  for (auto v : values) put_le<std::uint64_t>(r.payload, static_cast<std::uint64_t>(v));
  return r;
}

std::vector<std::int64_t> record_ints(const TensorRecord& r) {
  if (r.dtype != DType::i64 || r.shape.size() != 1) throw FormatError("tensor '" + r.name + "' is not a 1-D i64 tensor");
  std::vector<std::int64_t> v(r.shape[0]);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<std::int64_t>(get_le<std::uint64_t>(r.payload.data() + 8 * i));
  return v;
}

TensorRecord text_record(const std::string& name, const std::string& text) {
  return TensorRecord{name, DType::u8, {text.size()}, text};
}

std::string record_text(const TensorRecord& r) {
  if (r.dtype != DType::u8 || r.shape.size() != 1) throw FormatError("tensor '" + r.name + "' is not a 1-D u8 tensor");
  return r.payload;
}

// ---- checkpoints -------------------------------------------------------

std::string encoder_config_json(const EncoderConfig& c) {
  nlohmann::ordered_json j;
  j["input_dim"] = c.input_dim;
  j["cnn_channels"] = c.cnn_channels;
  j["downsample_factor"] = c.downsample_factor;
  j["transformer_blocks"] = c.transformer_blocks;
  j["attention_dim"] = c.attention_dim;
  j["attention_heads"] = c.attention_heads;
  j["ffn_dim"] = c.ffn_dim;
  j["projector_hidden_dim"] = c.projector_hidden_dim;
  j["projector_output_dim"] = c.projector_output_dim;
  j["positional_encoding"] = c.positional_encoding;
  j["dropout"] = c.dropout;
  j["batch_norm_momentum"] = c.batch_norm_momentum;
  return j.dump();
}

EncoderConfig encoder_config_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    EncoderConfig c;
    c.input_dim = j.at("input_dim").get<int>();
    c.cnn_channels = j.at("cnn_channels").get<std::vector<int>>();
    c.downsample_factor = j.at("downsample_factor").get<int>();
    c.transformer_blocks = j.at("transformer_blocks").get<int>();
    c.attention_dim = j.at("attention_dim").get<int>();
    c.attention_heads = j.at("attention_heads").get<int>();
    c.ffn_dim = j.at("ffn_dim").get<int>();
    c.projector_hidden_dim = j.at("projector_hidden_dim").get<int>();
    c.projector_output_dim = j.at("projector_output_dim").get<int>();
    c.positional_encoding = j.at("positional_encoding").get<bool>();
    c.dropout = j.at("dropout").get<double>();
    c.batch_norm_momentum = j.at("batch_norm_momentum").get<double>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed encoder config: ") + e.what());
  }
}

namespace {

TensorRecord f64_record(const std::string& name, const std::vector<double>& values) {
  Matrix<double> m(1, static_cast<Eigen::Index>(values.size()));
  for (std::size_t i = 0; i < values.size(); ++i) m(0, static_cast<Eigen::Index>(i)) = values[i];
  return matrix_record<double>(name, m);
}

template <typename Scalar>
void add_map(std::vector<TensorRecord>& out, const std::string& prefix, const ParamMap<Scalar>& m) {
  for (const auto& [k, v] : m) out.push_back(matrix_record<Scalar>(prefix + "/" + k, v));
}

}  // namespace

template <typename Scalar>
std::vector<TensorRecord> checkpoint_records(const Checkpoint<Scalar>& c) {
  std::vector<TensorRecord> out;
  out.push_back(text_record("meta.kind", c.kind));
  out.push_back(text_record("meta.encoder_config", encoder_config_json(c.encoder_config)));
  out.push_back(int_record("meta.position", {c.step, c.total_steps, c.round}));
  out.push_back(text_record("meta.rng_state", c.rng_state));
  out.push_back(text_record("meta.sampler_state", c.sampler_state));
  out.push_back(text_record("meta.config_hash", c.config_hash));
  add_map(out, "encoder.weights", c.encoder.weights);
  add_map(out, "encoder.buffers", c.encoder.buffers);
  add_map(out, "head", c.head);
  out.push_back(int_record("optimizer.step", {c.optimizer.step}));
  out.push_back(f64_record("optimizer.hparams", {c.optimizer.beta1, c.optimizer.beta2, c.optimizer.eps}));
  add_map(out, "optimizer.m", c.optimizer.m);
  add_map(out, "optimizer.v", c.optimizer.v);
  for (const auto& [k, n] : c.optimizer.updates) out.push_back(int_record("optimizer.updates/" + k, {n}));
  if (c.ema) {
    out.push_back(f64_record("ema.lambda", {c.ema->lambda}));
    add_map(out, "ema.weights", c.ema->target.weights);
    add_map(out, "ema.buffers", c.ema->target.buffers);
  }
  return out;
}

template <typename Scalar>
Checkpoint<Scalar> checkpoint_from_records(const std::vector<TensorRecord>& records, const std::string& origin) {
  Checkpoint<Scalar> c;
  bool has_config = false, has_position = false;
  auto scalars = [&](const TensorRecord& r, std::size_t n) {
    const auto m = record_matrix<double>(r);
    if (m.size() != static_cast<Eigen::Index>(n)) throw FormatError(origin + ": tensor '" + r.name + "' has the wrong size");
    return m;
  };
  auto ema = [&]() -> EmaState<Scalar>& {
    if (!c.ema) c.ema.emplace();
    return *c.ema;
  };
  try {
    for (const auto& r : records) {
      const auto slash = r.name.find('/');
      const std::string group = r.name.substr(0, slash);
      const std::string key = slash == std::string::npos ? std::string() : r.name.substr(slash + 1);
      if (r.name == "meta.kind") c.kind = record_text(r);
      else if (r.name == "meta.encoder_config") c.encoder_config = encoder_config_from_json(record_text(r)), has_config = true;
      else if (r.name == "meta.position") {
        const auto v = record_ints(r);
        if (v.size() != 3) throw FormatError("meta.position must hold 3 values");
        c.step = v[0], c.total_steps = v[1], c.round = v[2];
        has_position = true;
      } else if (r.name == "meta.rng_state") c.rng_state = record_text(r);
      else if (r.name == "meta.sampler_state") c.sampler_state = record_text(r);
      else if (r.name == "meta.config_hash") c.config_hash = record_text(r);
      else if (group == "encoder.weights") c.encoder.weights[key] = record_matrix<Scalar>(r);
      else if (group == "encoder.buffers") c.encoder.buffers[key] = record_matrix<Scalar>(r);
      else if (group == "head") c.head[key] = record_matrix<Scalar>(r);
      else if (r.name == "optimizer.step") {
        const auto v = record_ints(r);
        if (v.size() != 1) throw FormatError("optimizer.step must hold 1 value");
        c.optimizer.step = v[0];
      } else if (r.name == "optimizer.hparams") {
        const auto h = scalars(r, 3);
        c.optimizer.beta1 = h(0, 0), c.optimizer.beta2 = h(0, 1), c.optimizer.eps = h(0, 2);
      } else if (group == "optimizer.m") c.optimizer.m[key] = record_matrix<Scalar>(r);
      else if (group == "optimizer.v") c.optimizer.v[key] = record_matrix<Scalar>(r);
      else if (group == "optimizer.updates") {
        const auto v = record_ints(r);
        if (v.size() != 1) throw FormatError("update count must hold 1 value");
        c.optimizer.updates[key] = v[0];
      } else if (r.name == "ema.lambda") ema().lambda = scalars(r, 1)(0, 0);
      else if (group == "ema.weights") ema().target.weights[key] = record_matrix<Scalar>(r);
      else if (group == "ema.buffers") ema().target.buffers[key] = record_matrix<Scalar>(r);
      else throw FormatError("unexpected tensor '" + r.name + "'");
    }
  } catch (const FormatError& e) {
    throw FormatError(origin + ": " + e.what());
  }
  if (!has_config || !has_position || c.kind.empty()) throw FormatError(origin + ": not a checkpoint (metadata missing)");
  check_params(c.encoder_config, c.encoder);
  if (c.ema) check_params(c.encoder_config, c.ema->target);
  return c;
}

template <typename Scalar>
void save_checkpoint(const fs::path& path, const Checkpoint<Scalar>& c) {
  write_container(path, checkpoint_records(c));
}

template <typename Scalar>
Checkpoint<Scalar> load_checkpoint(const fs::path& path) {
  return checkpoint_from_records<Scalar>(read_container(path), path.string());
}

int checkpoint_precision(const fs::path& path) {
  for (const auto& r : read_container(path)) {
    if (r.name.rfind("encoder.weights/", 0) == 0) return r.dtype == DType::f32 ? 32 : 64;
  }
  throw FormatError(path.string() + ": checkpoint holds no encoder weights");
}

// ---- corpora -----------------------------------------------------------

std::vector<TensorRecord> utterance_records(const Utterance& u) {
  std::vector<TensorRecord> out;
  out.push_back(text_record("id", u.id));
  out.push_back(int_record("language", {u.language}));
  out.push_back(matrix_record<double>("features", u.features));
  if (u.has_labels()) out.push_back(int_record("frame_labels", {u.frame_labels.begin(), u.frame_labels.end()}));
  out.push_back(int_record("transcript", {u.transcript.begin(), u.transcript.end()}));
  return out;
}

Utterance utterance_from_records(const std::vector<TensorRecord>& records, const std::string& origin) {
  Utterance u;
  bool has_features = false;
  auto ints = [](const TensorRecord& r) {
    const auto v = record_ints(r);
    return std::vector<int>(v.begin(), v.end());
  };
  try {
    for (const auto& r : records) {
      if (r.name == "id") u.id = record_text(r);
      else if (r.name == "language") {
        const auto v = record_ints(r);
        if (v.size() != 1) throw FormatError("language must hold 1 value");
        u.language = static_cast<int>(v[0]);
      } else if (r.name == "features") u.features = record_matrix<double>(r), has_features = true;
      else if (r.name == "frame_labels") u.frame_labels = ints(r);
      else if (r.name == "transcript") u.transcript = ints(r);
      else throw FormatError("unexpected tensor '" + r.name + "'");
    }
  } catch (const FormatError& e) {
    throw FormatError(origin + ": " + e.what());
  }
  if (!has_features) throw FormatError(origin + ": utterance has no features");
  if (u.has_labels() && static_cast<Eigen::Index>(u.frame_labels.size()) != u.features.rows()) {
    throw DataError(origin + ": label count differs from frame count");
  }
  return u;
}

fs::path write_corpus(const Dataset& data, const fs::path& dir, const std::string& name) {
  std::ostringstream manifest;
  manifest << "id\tlanguage\tpath\tframes\thas_labels\n";
  for (const auto& u : data) {
    if (u.id.empty() || u.id.find_first_of("/\\\t\n") != std::string::npos || u.id[0] == '.') {
      throw DataError("utterance id '" + u.id + "' cannot be used as a file name");
    }
    const std::string rel = name + "/" + u.id + ".tensors";
    write_container(dir / rel, utterance_records(u));
    manifest << u.id << '\t' << u.language << '\t' << rel << '\t' << u.features.rows() << '\t'
             << (u.has_labels() ? 1 : 0) << '\n';
  }
  const fs::path path = dir / (name + ".tsv");
  write_file_atomic(path, manifest.str());
  return path;
}

Dataset read_corpus(const fs::path& manifest) {
  std::istringstream in(read_file(manifest));
  std::string line;
  if (!std::getline(in, line) || line != "id\tlanguage\tpath\tframes\thas_labels") {
    throw FormatError(manifest.string() + ": missing or unexpected manifest header");
  }
  Dataset data;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string id, lang, rel, frames, labeled;
    if (!std::getline(row, id, '\t') || !std::getline(row, lang, '\t') || !std::getline(row, rel, '\t') ||
        !std::getline(row, frames, '\t') || !std::getline(row, labeled)) {
      throw FormatError(manifest.string() + ":" + std::to_string(lineno) + ": expected 5 tab-separated fields");
    }
    const fs::path path = manifest.parent_path() / rel;
    auto u = utterance_from_records(read_container(path), path.string());
    if (u.id != id || std::to_string(u.language) != lang || std::to_string(u.features.rows()) != frames ||
        (u.has_labels() ? "1" : "0") != labeled) {
      throw DataError(manifest.string() + ":" + std::to_string(lineno) + ": manifest entry disagrees with " +
                      path.string());
    }
    data.push_back(std::move(u));
  }
  return data;
}

// ---- hashing -----------------------------------------------------------

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("sha256 failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

std::string file_sha256(const fs::path& path) { return sha256_hex(read_file(path)); }

template TensorRecord matrix_record<float>(const std::string&, const Matrix<float>&);
template TensorRecord matrix_record<double>(const std::string&, const Matrix<double>&);
template Matrix<float> record_matrix<float>(const TensorRecord&);
template Matrix<double> record_matrix<double>(const TensorRecord&);
template std::vector<TensorRecord> checkpoint_records<float>(const Checkpoint<float>&);
template std::vector<TensorRecord> checkpoint_records<double>(const Checkpoint<double>&);
template Checkpoint<float> checkpoint_from_records<float>(const std::vector<TensorRecord>&, const std::string&);
template Checkpoint<double> checkpoint_from_records<double>(const std::vector<TensorRecord>&, const std::string&);
template void save_checkpoint<float>(const fs::path&, const Checkpoint<float>&);
template void save_checkpoint<double>(const fs::path&, const Checkpoint<double>&);
template Checkpoint<float> load_checkpoint<float>(const fs::path&);
template Checkpoint<double> load_checkpoint<double>(const fs::path&);

}  // namespace xlst
