#pragma once

// On-disk formats. Checkpoints and utterance feature files share one
// self-describing container:
//
//   "XLSTTNSR" | u32 version | u64 count |
//   count x (u32 name length, name, u8 dtype, u32 rank, rank x u64 dims,
//            u64 payload bytes, payload) |
//   u32 CRC-32 of everything before it
//
// All integers and payloads are little-endian.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "xlst/corpus.hpp"
#include "xlst/train_state.hpp"

namespace xlst {

constexpr std::uint32_t container_version = 1;

enum class DType : std::uint8_t { f32 = 1, f64 = 2, i64 = 3, u8 = 4 };

const char* dtype_name(DType t);

struct TensorRecord {
  std::string name;
  DType dtype = DType::f64;
  std::vector<std::uint64_t> shape;
  std::string payload;  // little-endian element bytes

  bool operator==(const TensorRecord&) const = default;
};

std::string encode_container(const std::vector<TensorRecord>& records);
// origin names the source in diagnostics.
std::vector<TensorRecord> decode_container(const std::string& bytes, const std::string& origin = "container");

// Writes through a temporary file and a rename, so readers never see a
// partial file.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

void write_container(const std::filesystem::path& path, const std::vector<TensorRecord>& records);
std::vector<TensorRecord> read_container(const std::filesystem::path& path);

template <typename Scalar>
TensorRecord matrix_record(const std::string& name, const Matrix<Scalar>& m);
// Throws FormatError unless the record holds a 2-D tensor of Scalar.
template <typename Scalar>
Matrix<Scalar> record_matrix(const TensorRecord& r);

TensorRecord int_record(const std::string& name, const std::vector<std::int64_t>& values);
std::vector<std::int64_t> record_ints(const TensorRecord& r);
TensorRecord text_record(const std::string& name, const std::string& text);
std::string record_text(const TensorRecord& r);

// ---- checkpoints -------------------------------------------------------

template <typename Scalar>
std::vector<TensorRecord> checkpoint_records(const Checkpoint<Scalar>& c);
template <typename Scalar>
Checkpoint<Scalar> checkpoint_from_records(const std::vector<TensorRecord>& records, const std::string& origin);

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<Scalar>& c);
template <typename Scalar>
Checkpoint<Scalar> load_checkpoint(const std::filesystem::path& path);

// 32 or 64, read from the dtype of the stored encoder weights.
int checkpoint_precision(const std::filesystem::path& path);

std::string encoder_config_json(const EncoderConfig& c);
EncoderConfig encoder_config_from_json(const std::string& text);

// ---- corpora -----------------------------------------------------------

// Manifest `<dir>/<name>.tsv` with columns id, language, path, frames,
// has_labels; one container per utterance under `<dir>/<name>/`. Returns
// the manifest path.
std::filesystem::path write_corpus(const Dataset& data, const std::filesystem::path& dir, const std::string& name);
Dataset read_corpus(const std::filesystem::path& manifest);

std::vector<TensorRecord> utterance_records(const Utterance& u);
Utterance utterance_from_records(const std::vector<TensorRecord>& records, const std::string& origin);

// ---- hashing -----------------------------------------------------------

std::string sha256_hex(const std::string& bytes);
std::string file_sha256(const std::filesystem::path& path);

}  // namespace xlst
