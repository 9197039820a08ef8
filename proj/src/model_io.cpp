#include "redunet/model_io.hpp"

#include "redunet/errors.hpp"

#include <zlib.h>

#include <array>
#include <bit>
#include <cstring>
#include <sstream>
#include <string>

namespace redunet {

namespace {

constexpr const char* kMagic = "REDUNET-MODEL";
constexpr std::size_t kMaxHeaderBytes = 1 << 20;

std::uint32_t crc_update(std::uint32_t crc, const void* data, std::size_t n) {
  return static_cast<std::uint32_t>(
      crc32_z(crc, static_cast<const Bytef*>(data), static_cast<z_size_t>(n)));
}

void encode_le(double v, unsigned char* out) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out[i] = static_cast<unsigned char>(bits >> (8 * i));
}

double decode_le(const unsigned char* in) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= std::uint64_t{in[i]} << (8 * i);
  return std::bit_cast<double>(bits);
}

std::size_t payload_doubles(const ReduNetModel& m, std::size_t stored_layers) {
  const std::size_t k = m.num_classes();
  const std::size_t d2 = static_cast<std::size_t>(m.dim) * static_cast<std::size_t>(m.dim);
  std::size_t n = 3 + 2 * k + m.depth();
  n += stored_layers * (2 + 2 * k + (k + 1) * d2);
  n += k * d2;
  for (const auto& [name, v] : m.aux) n += static_cast<std::size_t>(v.size());
  return n;
}

std::string header_text(const ReduNetModel& m, std::size_t stored_layers) {
  std::ostringstream h;
  h << kMagic << '\n' << "version " << kModelFormatVersion << '\n';
  h << "dim " << m.dim << '\n' << "depth " << m.depth() << '\n';
  h << "classes " << m.num_classes() << '\n' << "stored_layers " << stored_layers << '\n';
  h << "registry";
  for (ClassId id : m.registry) h << ' ' << id;
  h << '\n' << "counts";
  for (Index c : m.counts) h << ' ' << c;
  h << '\n';
  for (const auto& [key, value] : m.metadata) {
    if (key.empty() || key.find_first_of(" \t\n") != std::string::npos ||
        value.find('\n') != std::string::npos) {
      throw InvalidInput("metadata entry '" + key + "' cannot be stored in the header");
    }
    h << "meta " << key << ' ' << value << '\n';
  }
  for (const auto& [name, v] : m.aux) {
    if (name.empty() || name.find_first_of(" \t\n") != std::string::npos) {
      throw InvalidInput("vector name '" + name + "' cannot be stored in the header");
    }
    h << "vector " << name << ' ' << v.size() << '\n';
  }
  h << "payload " << 8 * payload_doubles(m, stored_layers) << '\n' << "end\n";
  return h.str();
}

}  // namespace

// ---------------------------------------------------------------------------
// Writer

ModelWriter::ModelWriter(const std::filesystem::path& path, const ReduNetModel& skeleton,
                         std::size_t stored_layers)
    : path_(path), tmp_path_(path.string() + ".tmp"), skeleton_(skeleton),
      stored_layers_(stored_layers) {
  skeleton_.layers.clear();
  skeleton_.final_covariances.clear();
  if (stored_layers != skeleton_.depth() && stored_layers != std::min<std::size_t>(1, skeleton_.depth())) {
    throw InvalidInput("a container stores every layer or only the first one");
  }
  if (skeleton_.counts.size() != skeleton_.num_classes() ||
      skeleton_.params.alpha_j.size() != skeleton_.num_classes() ||
      skeleton_.params.gamma.size() != skeleton_.num_classes()) {
    throw InvalidInput("model per-class containers disagree with the registry");
  }
  const std::string header = header_text(skeleton_, stored_layers);
  out_.open(tmp_path_, std::ios::binary | std::ios::trunc);
  if (!out_) throw InvalidInput("cannot write " + tmp_path_.string());
  put_bytes(header.data(), header.size());

  put(skeleton_.params.epsilon);
  put(skeleton_.lambda);
  put(skeleton_.params.alpha);
  for (double a : skeleton_.params.alpha_j) put(a);
  for (double g : skeleton_.params.gamma) put(g);
  for (double eta : skeleton_.step_sizes) put(eta);
  for (const auto& [name, v] : skeleton_.aux) put(Matrix(v));
}

ModelWriter::~ModelWriter() {
  if (!finished_) {
    out_.close();
    std::error_code ec;
    std::filesystem::remove(tmp_path_, ec);
  }
}

void ModelWriter::put_bytes(const void* data, std::size_t n) {
  out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  crc_ = crc_update(crc_, data, n);
}

void ModelWriter::put(double v) {
  unsigned char buf[8];
  encode_le(v, buf);
  put_bytes(buf, 8);
}

void ModelWriter::put(const Matrix& m) {
  if constexpr (std::endian::native == std::endian::little) {
    put_bytes(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double));
  } else {
    for (Index i = 0; i < m.size(); ++i) put(m.data()[i]);
  }
}

void ModelWriter::write_layer(const Layer& layer) {
  const std::size_t k = skeleton_.num_classes();
  if (written_layers_ >= stored_layers_) throw InvalidInput("more layers written than declared");
  if (layer.dim() != skeleton_.dim || layer.E.cols() != skeleton_.dim || layer.C.size() != k ||
      layer.gamma.size() != k || layer.alpha_j.size() != k) {
    throw InvalidInput("layer shape does not match the container header");
  }
  put(layer.eta);
  put(layer.alpha);
  for (double g : layer.gamma) put(g);
  for (double a : layer.alpha_j) put(a);
  put(layer.E);
  for (const Matrix& c : layer.C) {
    if (c.rows() != skeleton_.dim || c.cols() != skeleton_.dim) {
      throw InvalidInput("compression matrix shape does not match the container header");
    }
    put(c);
  }
  ++written_layers_;
}

void ModelWriter::finish(std::span<const Matrix> final_covariances) {
  if (written_layers_ != stored_layers_) throw InvalidInput("not every declared layer was written");
  if (final_covariances.size() != skeleton_.num_classes()) {
    throw InvalidInput("need one final covariance per class");
  }
  for (const Matrix& s : final_covariances) {
    if (s.rows() != skeleton_.dim || s.cols() != skeleton_.dim) {
      throw InvalidInput("final covariance shape does not match the container header");
    }
    put(s);
  }
  unsigned char trailer[4];
  for (int i = 0; i < 4; ++i) trailer[i] = static_cast<unsigned char>(crc_ >> (8 * i));
  out_.write(reinterpret_cast<const char*>(trailer), 4);
  out_.close();
  if (!out_) throw InvalidInput("failed writing " + tmp_path_.string());
  std::filesystem::rename(tmp_path_, path_);
  finished_ = true;
}

void save_model(const ReduNetModel& model, const std::filesystem::path& path) {
  validate_model(model);
  ModelWriter writer(path, model, model.layers.size());
  for (const Layer& layer : model.layers) writer.write_layer(layer);
  writer.finish(model.final_covariances);
}

// ---------------------------------------------------------------------------
// Reader

namespace {

std::vector<std::string> split_words(const std::string& line) {
  std::istringstream in(line);
  std::vector<std::string> words;
  for (std::string w; in >> w;) words.push_back(w);
  return words;
}

long long parse_int(const std::string& s, std::uint64_t offset) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError("malformed integer '" + s + "' in model header", offset);
  }
}

}  // namespace

ModelReader::ModelReader(const std::filesystem::path& path) : path_(path) {
  in_.open(path, std::ios::binary);
  if (!in_) throw InvalidInput("cannot open " + path.string());

  std::size_t declared_payload = 0;
  std::size_t classes = 0;
  std::size_t depth = 0;
  bool saw_end = false;
  bool saw_version = false;
  std::string line;
  while (std::getline(in_, line)) {
    const std::uint64_t line_offset = offset_;
    crc_ = crc_update(crc_, line.data(), line.size());
    crc_ = crc_update(crc_, "\n", 1);
    offset_ += line.size() + 1;
    if (offset_ > kMaxHeaderBytes) throw FormatError("model header too long", line_offset);
    if (line_offset == 0) {
      if (line != kMagic) throw FormatError(path.string() + " is not a model container", 0);
      continue;
    }
    const auto w = split_words(line);
    if (w.empty()) throw FormatError("empty header line", line_offset);
    const std::string& key = w[0];
    if (key == "end") {
      saw_end = true;
      break;
    }
    if (key == "version") {
      if (w.size() != 2) throw FormatError("malformed version line", line_offset);
      const auto v = parse_int(w[1], line_offset);
      if (v != kModelFormatVersion) {
        throw VersionMismatch("model container version " + w[1] + ", expected " +
                              std::to_string(kModelFormatVersion));
      }
      saw_version = true;
    } else if (key == "dim" && w.size() == 2) {
      skeleton_.dim = parse_int(w[1], line_offset);
    } else if (key == "depth" && w.size() == 2) {
      depth = static_cast<std::size_t>(parse_int(w[1], line_offset));
    } else if (key == "classes" && w.size() == 2) {
      classes = static_cast<std::size_t>(parse_int(w[1], line_offset));
    } else if (key == "stored_layers" && w.size() == 2) {
      stored_layers_ = static_cast<std::size_t>(parse_int(w[1], line_offset));
    } else if (key == "registry") {
      for (std::size_t i = 1; i < w.size(); ++i) {
        skeleton_.registry.push_back(static_cast<ClassId>(parse_int(w[i], line_offset)));
      }
    } else if (key == "counts") {
      for (std::size_t i = 1; i < w.size(); ++i) {
        skeleton_.counts.push_back(static_cast<Index>(parse_int(w[i], line_offset)));
      }
    } else if (key == "meta" && w.size() >= 2) {
      const std::string prefix = "meta " + w[1];
      if (line.compare(0, prefix.size(), prefix) != 0) {
        throw FormatError("malformed meta line", line_offset);
      }
      skeleton_.metadata[w[1]] =
          line.size() > prefix.size() + 1 ? line.substr(prefix.size() + 1) : std::string();
    } else if (key == "vector" && w.size() == 3) {
      vectors_.emplace_back(w[1], static_cast<Index>(parse_int(w[2], line_offset)));
    } else if (key == "payload" && w.size() == 2) {
      declared_payload = static_cast<std::size_t>(parse_int(w[1], line_offset));
    } else {
      throw FormatError("unknown model header line '" + line + "'", line_offset);
    }
  }
  if (!saw_end) throw FormatError("model header is not terminated", offset_);
  if (!saw_version) throw FormatError("model header has no version", offset_);
  if (skeleton_.dim < 1 || classes < 1 || skeleton_.registry.size() != classes ||
      skeleton_.counts.size() != classes) {
    throw FormatError("model header shapes are inconsistent", 0);
  }
  if (stored_layers_ != depth && stored_layers_ != std::min<std::size_t>(1, depth)) {
    throw FormatError("stored layer count must equal depth or one", 0);
  }

  skeleton_.params.epsilon = get();
  skeleton_.lambda = get();
  skeleton_.params.alpha = get();
  skeleton_.params.alpha_j.resize(classes);
  skeleton_.params.gamma.resize(classes);
  for (double& a : skeleton_.params.alpha_j) a = get();
  for (double& g : skeleton_.params.gamma) g = get();
  skeleton_.step_sizes.resize(depth);
  for (double& eta : skeleton_.step_sizes) eta = get();

  std::size_t aux_doubles = 0;
  for (const auto& [name, len] : vectors_) {
    if (len < 0) throw FormatError("negative vector length in model header", 0);
    aux_doubles += static_cast<std::size_t>(len);
  }
  if (declared_payload != 8 * (payload_doubles(skeleton_, stored_layers_) + aux_doubles)) {
    throw FormatError("declared payload size does not match the header shapes", offset_);
  }
  for (const auto& [name, len] : vectors_) skeleton_.aux[name] = get_matrix(len, 1);
}

void ModelReader::get_bytes(void* data, std::size_t n) {
  in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in_.gcount()) != n) {
    throw FormatError(path_.string() + ": truncated model payload", offset_ + in_.gcount());
  }
  crc_ = crc_update(crc_, data, n);
  offset_ += n;
}

double ModelReader::get() {
  unsigned char buf[8];
  get_bytes(buf, 8);
  return decode_le(buf);
}

Matrix ModelReader::get_matrix(Index rows, Index cols) {
  Matrix m(rows, cols);
  if constexpr (std::endian::native == std::endian::little) {
    get_bytes(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double));
  } else {
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = get();
  }
  return m;
}

std::optional<Layer> ModelReader::next_layer() {
  if (read_layers_ >= stored_layers_) return std::nullopt;
  const std::size_t k = skeleton_.num_classes();
  const Index d = skeleton_.dim;
  Layer layer;
  layer.eta = get();
  layer.alpha = get();
  layer.gamma.resize(k);
  layer.alpha_j.resize(k);
  for (double& g : layer.gamma) g = get();
  for (double& a : layer.alpha_j) a = get();
  layer.E = get_matrix(d, d);
  layer.C.reserve(k);
  for (std::size_t j = 0; j < k; ++j) layer.C.push_back(get_matrix(d, d));
  ++read_layers_;
  return layer;
}

ReduNetModel ModelReader::finish() {
  while (read_layers_ < stored_layers_) next_layer();
  ReduNetModel model = skeleton_;
  for (std::size_t j = 0; j < model.num_classes(); ++j) {
    model.final_covariances.push_back(get_matrix(model.dim, model.dim));
  }
  const std::uint32_t computed = crc_;
  unsigned char trailer[4];
  in_.read(reinterpret_cast<char*>(trailer), 4);
  if (in_.gcount() != 4) throw FormatError(path_.string() + ": missing checksum trailer", offset_);
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= std::uint32_t{trailer[i]} << (8 * i);
  if (stored != computed) throw ChecksumError(path_.string() + ": checksum mismatch");
  if (in_.peek() != std::char_traits<char>::eof()) {
    throw FormatError(path_.string() + ": trailing bytes after checksum", offset_ + 4);
  }
  return model;
}

bool verify_checksum(const std::filesystem::path& path) {
  std::error_code ec;
  const auto size = std::filesystem::file_size(path, ec);
  if (ec) throw InvalidInput("cannot stat " + path.string());
  if (size < 4) return false;
  std::ifstream in(path, std::ios::binary);
  std::uint32_t crc = 0;
  std::vector<char> buf(1 << 20);
  std::uintmax_t remaining = size - 4;
  while (remaining > 0) {
    const auto n = static_cast<std::size_t>(std::min<std::uintmax_t>(remaining, buf.size()));
    in.read(buf.data(), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n) return false;
    crc = crc_update(crc, buf.data(), n);
    remaining -= n;
  }
  unsigned char trailer[4];
  in.read(reinterpret_cast<char*>(trailer), 4);
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i) stored |= std::uint32_t{trailer[i]} << (8 * i);
  return stored == crc;
}

ReduNetModel load_model(const std::filesystem::path& path, LayerRetention retention) {
  if (!verify_checksum(path)) throw ChecksumError(path.string() + ": checksum mismatch");
  ModelReader reader(path);
  std::vector<Layer> layers;
  while (auto layer = reader.next_layer()) {
    if (retention == LayerRetention::kAll || layers.empty()) layers.push_back(std::move(*layer));
  }
  ReduNetModel model = reader.finish();
  model.layers = std::move(layers);
  validate_model(model);
  return model;
}

}  // namespace redunet
