#include "mcls/checkpoint.hpp"

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "config_json.hpp"
#include "mcls/errors.hpp"
#include "mcls/rng.hpp"

namespace mcls::ckpt {

namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'M', 'C', 'L', 'S'};
constexpr std::size_t kPreludeBytes = 16;  // magic + version + header length
constexpr std::uint64_t kMaxElements = 1ull << 40;

void put_u32_le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

void put_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

void put_f64_le(std::string& out, double v) {
  std::uint64_t bits = 0;
  std::memcpy(&bits, &v, sizeof bits);
  put_u64_le(out, bits);
}

std::uint32_t get_u32_le(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(p[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[i]) << (8 * i);
  return v;
}

double get_f64_le(const unsigned char* p) {
  const std::uint64_t bits = get_u64_le(p);
  double v = 0.0;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}

std::uint64_t checked_numel(const std::vector<int>& shape,
                            const std::string& name) {
  std::uint64_t n = 1;
  for (int e : shape) {
    if (e <= 0) {
      throw InputError("checkpoint array '" + name +
                       "': shape extents must be positive");
    }
    n *= std::uint64_t(e);
    if (n > kMaxElements) {
      throw InputError("checkpoint array '" + name + "': too large");
    }
  }
  return n;
}

Tensor deep_copy(const Tensor& t) { return Tensor::from(t.shape, *t.data); }

void write_file_atomic(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw IoError("save_checkpoint: cannot open '" + tmp + "' for writing");
    }
    out.write(bytes.data(), std::streamsize(bytes.size()));
    out.flush();
    if (!out) {
      out.close();
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw IoError("save_checkpoint: failed writing '" + tmp + "'");
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError("save_checkpoint: cannot rename into '" + path + "'");
  }
}

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : arrays) {
    if (n == name) return &t;
  }
  return nullptr;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  json manifest = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.arrays) {
    if (name.empty()) {
      throw InputError("save_checkpoint: array names must be non-empty");
    }
    const std::uint64_t n = checked_numel(t.shape, name);
    if (n != t.data->size()) {
      throw ShapeError("save_checkpoint: array '" + name +
                       "' shape does not match its element count");
    }
    json entry;
    entry["name"] = name;
    entry["dtype"] = "f64";
    entry["shape"] = t.shape;
    entry["offset"] = offset;
    manifest.push_back(std::move(entry));
    offset += 8 * n;
  }

  json header;
  header["model"] = detail::model_config_to_json(ckpt.config);
  header["arrays"] = std::move(manifest);
  header["extra"] = ckpt.extra;
  const std::string header_text = header.dump();

  std::string bytes;
  bytes.reserve(kPreludeBytes + header_text.size() + offset);
  bytes.append(kMagic, 4);
  put_u32_le(bytes, kFormatVersion);
  put_u64_le(bytes, header_text.size());
  bytes += header_text;
  for (const auto& [name, t] : ckpt.arrays) {
    (void)name;
    for (double v : *t.data) put_f64_le(bytes, v);
  }
  write_file_atomic(path, bytes);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IoError("load_checkpoint: cannot open '" + path + "'");
  }
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  if (!in.good() && !in.eof()) {
    throw IoError("load_checkpoint: failed reading '" + path + "'");
  }
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < kPreludeBytes) {
    throw InputError("load_checkpoint: '" + path +
                     "': file too small to be a checkpoint");
  }
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw InputError("load_checkpoint: '" + path + "': bad magic bytes");
  }
  const std::uint32_t version = get_u32_le(p + 4);
  if (version != kFormatVersion) {
    throw InputError("load_checkpoint: '" + path +
                     "': unsupported format version " +
                     std::to_string(version));
  }
  const std::uint64_t header_len = get_u64_le(p + 8);
  if (header_len > bytes.size() - kPreludeBytes) {
    throw InputError("load_checkpoint: '" + path +
                     "': header length out of bounds");
  }
  json header;
  try {
    header = json::parse(bytes.begin() + kPreludeBytes,
                         bytes.begin() + kPreludeBytes +
                             std::string::difference_type(header_len));
  } catch (const json::exception& e) {
    throw InputError("load_checkpoint: '" + path + "': invalid header JSON: " +
                     e.what());
  }
  detail::reject_unknown_keys(header, {"model", "arrays", "extra"},
                              "checkpoint header");
  if (!header.contains("model") || !header.contains("arrays")) {
    throw InputError("load_checkpoint: '" + path +
                     "': header is missing 'model' or 'arrays'");
  }

  Checkpoint ckpt;
  ckpt.config =
      detail::model_config_from_json(header["model"], "checkpoint model");
  if (header.contains("extra")) {
    if (!header["extra"].is_object()) {
      throw InputError("load_checkpoint: '" + path +
                       "': 'extra' must be an object");
    }
    for (const auto& item : header["extra"].items()) {
      if (!item.value().is_string()) {
        throw InputError("load_checkpoint: '" + path + "': extra key '" +
                         item.key() + "' must map to a string");
      }
      ckpt.extra[item.key()] = item.value().get<std::string>();
    }
  }

  const std::size_t payload_start = kPreludeBytes + header_len;
  const std::uint64_t payload_size = bytes.size() - payload_start;
  if (!header["arrays"].is_array()) {
    throw InputError("load_checkpoint: '" + path +
                     "': 'arrays' must be an array");
  }

  struct Extent {
    std::uint64_t offset = 0;
    std::uint64_t size = 0;
    std::string name;
  };
  std::vector<Extent> extents;

  for (const auto& entry : header["arrays"]) {
    detail::reject_unknown_keys(entry, {"name", "dtype", "shape", "offset"},
                                "checkpoint manifest entry");
    std::string name, dtype;
    detail::read_string(entry, "name", name, "checkpoint manifest entry");
    detail::read_string(entry, "dtype", dtype, "checkpoint manifest entry");
    if (name.empty()) {
      throw InputError("load_checkpoint: '" + path +
                       "': manifest entry without a name");
    }
    if (dtype != "f64") {
      throw InputError("load_checkpoint: '" + path + "': array '" + name +
                       "' has unsupported dtype '" + dtype + "'");
    }
    std::vector<int> shape;
    detail::read_int_vector(entry, "shape", shape, "checkpoint manifest entry");
    if (shape.empty()) {
      throw InputError("load_checkpoint: '" + path + "': array '" + name +
                       "' is missing its shape");
    }
    std::uint64_t offs = 0;
    detail::read_u64(entry, "offset", offs, "checkpoint manifest entry");
    if (!entry.contains("offset")) {
      throw InputError("load_checkpoint: '" + path + "': array '" + name +
                       "' is missing its offset");
    }
    if (ckpt.find(name) != nullptr) {
      throw InputError("load_checkpoint: '" + path + "': duplicate array '" +
                       name + "'");
    }

    const std::uint64_t n = checked_numel(shape, name);
    const std::uint64_t nbytes = 8 * n;
    if (offs > payload_size || nbytes > payload_size - offs) {
      throw InputError("load_checkpoint: '" + path + "': array '" + name +
                       "' extends past the end of the payload");
    }
    extents.push_back({offs, nbytes, name});

    std::vector<double> values(n);
    const unsigned char* src = p + payload_start + offs;
    for (std::uint64_t i = 0; i < n; ++i) {
      values[i] = get_f64_le(src + 8 * i);
    }
    ckpt.arrays.emplace_back(name, Tensor::from(shape, std::move(values)));
  }

  std::sort(extents.begin(), extents.end(),
            [](const Extent& a, const Extent& b) { return a.offset < b.offset; });
  for (std::size_t i = 0; i + 1 < extents.size(); ++i) {
    if (extents[i].offset + extents[i].size > extents[i + 1].offset) {
      throw InputError("load_checkpoint: '" + path + "': arrays '" +
                       extents[i].name + "' and '" + extents[i + 1].name +
                       "' overlap");
    }
  }
  return ckpt;
}

namespace {

// Copies checkpoint arrays into a live parameter set, requiring an exact
// match between the checkpoint manifest and the parameter names/shapes.
template <typename NamedParams>
void fill_from_checkpoint(const Checkpoint& ckpt, NamedParams named,
                          std::size_t expected_count) {
  if (ckpt.arrays.size() != expected_count) {
    throw InputError("checkpoint carries " +
                     std::to_string(ckpt.arrays.size()) + " arrays, expected " +
                     std::to_string(expected_count));
  }
  for (auto& [name, t] : named) {
    const Tensor* src = ckpt.find(name);
    if (src == nullptr) {
      throw InputError("checkpoint is missing array '" + name + "'");
    }
    if (src->shape != t->shape) {
      throw ShapeError("checkpoint array '" + name +
                       "' has a mismatched shape");
    }
    *t->data = *src->data;
  }
}

}  // namespace

Checkpoint from_encoder(const encoder::ModelConfig& config,
                        const encoder::EncoderParams& params) {
  Checkpoint ckpt;
  ckpt.config = config;
  for (const auto& [name, t] : params.named_params()) {
    ckpt.arrays.emplace_back(name, deep_copy(*t));
  }
  ckpt.extra["phase"] = "pretrain";
  return ckpt;
}

encoder::EncoderParams to_encoder(const Checkpoint& ckpt) {
  ckpt.config.validate();
  Rng scratch(0);
  encoder::EncoderParams params = encoder::EncoderParams::init(ckpt.config,
                                                               scratch);
  auto named = params.named_params();
  fill_from_checkpoint(ckpt, named, named.size());
  return params;
}

Checkpoint from_finetuned(const finetune::FinetunedModel& model) {
  Checkpoint ckpt;
  ckpt.config = model.config;
  for (const auto& [name, t] : model.named_params()) {
    ckpt.arrays.emplace_back(name, deep_copy(*t));
  }
  ckpt.extra["phase"] = "finetune";
  ckpt.extra["aggregation"] = finetune::aggregation_name(model.aggregation);
  ckpt.extra["kind"] = model.kind == finetune::TaskKind::classification
                           ? "classification"
                           : "regression";
  ckpt.extra["n_classes"] = std::to_string(model.n_classes);
  return ckpt;
}

finetune::FinetunedModel to_finetuned(const Checkpoint& ckpt) {
  ckpt.config.validate();
  for (const char* key : {"aggregation", "kind", "n_classes"}) {
    if (ckpt.extra.find(key) == ckpt.extra.end()) {
      throw InputError(std::string("checkpoint is not a fine-tuned model: "
                                   "missing extra key '") +
                       key + "'");
    }
  }
  finetune::FinetunedModel model;
  model.config = ckpt.config;
  model.aggregation = finetune::parse_aggregation(ckpt.extra.at("aggregation"));
  const std::string& kind = ckpt.extra.at("kind");
  if (kind == "classification") {
    model.kind = finetune::TaskKind::classification;
  } else if (kind == "regression") {
    model.kind = finetune::TaskKind::regression;
  } else {
    throw InputError("checkpoint has unknown task kind '" + kind + "'");
  }
  try {
    model.n_classes = std::stoi(ckpt.extra.at("n_classes"));
  } catch (const std::exception&) {
    throw InputError("checkpoint has a malformed n_classes value");
  }
  if (model.n_classes < 1 ||
      (model.kind == finetune::TaskKind::regression && model.n_classes != 1)) {
    throw InputError("checkpoint has an invalid n_classes value");
  }

  Rng scratch(0);
  model.encoder = encoder::EncoderParams::init(ckpt.config, scratch);
  const int k = ckpt.config.k;
  const int d = ckpt.config.d_model;
  model.agg_w = Tensor::zeros({k, d, d});
  model.cls_w = Tensor::zeros({d, model.n_classes});
  model.cls_b = Tensor::zeros({model.n_classes});
  auto named = model.named_params();
  fill_from_checkpoint(ckpt, named, named.size());
  return model;
}

}  // namespace mcls::ckpt
