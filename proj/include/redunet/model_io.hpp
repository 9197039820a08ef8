#pragma once

// Model container.
//
//   REDUNET-MODEL                  plain-text header, one field per line
//   version 1
//   dim <d>
//   depth <L>
//   classes <k>
//   stored_layers <L or 1>
//   registry <id_1> ... <id_k>
//   counts <m_1> ... <m_k>
//   meta <key> <value>             zero or more
//   vector <name> <length>         zero or more
//   payload <bytes>
//   end
//   <payload>                      little-endian IEEE-754 binary64
//   <crc32>                        4 bytes, little-endian, over everything above
//
// Payload order: epsilon, lambda, alpha, alpha_j[k], gamma[k], eta[L], the named
// vectors; then per stored layer: eta, alpha, gamma[k], alpha_j[k], E,
// C_1..C_k (d x d, column-major); then the k final covariances.

#include "redunet/net_builder.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>

namespace redunet {

inline constexpr int kModelFormatVersion = 1;

void save_model(const ReduNetModel& model, const std::filesystem::path& path);
/// kFirstOnly discards every layer after the first while reading.
ReduNetModel load_model(const std::filesystem::path& path,
                        LayerRetention retention = LayerRetention::kAll);

/// Writes a container layer by layer, so a model never has to be held in
/// memory in full. The file appears under `path` only after finish().
class ModelWriter {
 public:
  /// `skeleton` supplies everything but the layers and final covariances.
  ModelWriter(const std::filesystem::path& path, const ReduNetModel& skeleton,
              std::size_t stored_layers);
  ~ModelWriter();
  ModelWriter(const ModelWriter&) = delete;
  ModelWriter& operator=(const ModelWriter&) = delete;

  void write_layer(const Layer& layer);
  void finish(std::span<const Matrix> final_covariances);

 private:
  void put(double v);
  void put(const Matrix& m);
  void put_bytes(const void* data, std::size_t n);

  std::filesystem::path path_;
  std::filesystem::path tmp_path_;
  std::ofstream out_;
  std::uint32_t crc_ = 0;
  ReduNetModel skeleton_;
  std::size_t stored_layers_ = 0;
  std::size_t written_layers_ = 0;
  bool finished_ = false;
};

/// Sequential reader; the checksum is verified when finish() is reached.
class ModelReader {
 public:
  explicit ModelReader(const std::filesystem::path& path);

  /// Header fields, scalars and named vectors: everything except layers and
  /// final covariances.
  const ReduNetModel& skeleton() const noexcept { return skeleton_; }
  std::size_t stored_layers() const noexcept { return stored_layers_; }

  /// Next stored layer, or nullopt once all have been read.
  std::optional<Layer> next_layer();

  /// Reads the remaining layers (discarding them) and the final covariances,
  /// and verifies the checksum. Returns the skeleton completed
  /// with those fields.
  ReduNetModel finish();

 private:
  double get();
  Matrix get_matrix(Index rows, Index cols);
  void get_bytes(void* data, std::size_t n);

  std::filesystem::path path_;
  std::ifstream in_;
  std::uint32_t crc_ = 0;
  std::uint64_t offset_ = 0;
  ReduNetModel skeleton_;
  std::vector<std::pair<std::string, Index>> vectors_;
  std::size_t stored_layers_ = 0;
  std::size_t read_layers_ = 0;
};

/// CRC-32 of a whole file except its 4-byte trailer, compared with the trailer.
bool verify_checksum(const std::filesystem::path& path);

}  // namespace redunet
