#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <unistd.h>
#include <vector>

#include "mcls/checkpoint.hpp"
#include "mcls/encoder.hpp"
#include "mcls/errors.hpp"
#include "mcls/finetune.hpp"
#include "mcls/log.hpp"
#include "mcls/rng.hpp"
#include "mcls/runconfig.hpp"
#include "mcls/tensor.hpp"

using namespace mcls;
using namespace mcls::ckpt;

namespace {

namespace fs = std::filesystem;

fs::path scratch_dir() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() /
                 ("mcls_ckpt_test_" + std::to_string(::getpid()));
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string tmp_path(const std::string& name) {
  return (scratch_dir() / name).string();
}

encoder::ModelConfig small_config() {
  encoder::ModelConfig c;
  c.k = 2;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 16;
  c.insert_layers = {1};
  c.vocab_size = 24;
  c.max_len = 12;
  c.dropout_p = 0.1;
  return c;
}

std::string read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(bool(in));
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

void write_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  REQUIRE(bool(out));
  out.write(bytes.data(), std::streamsize(bytes.size()));
}

// Independent writer mirroring the on-disk layout, for crafting corrupt files.
std::string raw_file(std::uint32_t version, const std::string& header,
                     const std::string& payload) {
  std::string bytes = "MCLS";
  for (int i = 0; i < 4; ++i) bytes.push_back(char((version >> (8 * i)) & 0xff));
  const std::uint64_t len = header.size();
  for (int i = 0; i < 8; ++i) bytes.push_back(char((len >> (8 * i)) & 0xff));
  bytes += header;
  bytes += payload;
  return bytes;
}

std::string le_doubles(const std::vector<double>& values) {
  std::string out;
  for (double v : values) {
    std::uint64_t bits = 0;
    std::memcpy(&bits, &v, 8);
    for (int i = 0; i < 8; ++i) out.push_back(char((bits >> (8 * i)) & 0xff));
  }
  return out;
}

std::string header_with_arrays(const std::string& arrays_json) {
  return std::string("{\"model\":{\"k\":2,\"d_model\":8,\"n_layers\":2,"
                     "\"n_heads\":2,\"d_ff\":16,\"insert_layers\":[1],"
                     "\"vocab_size\":24,\"max_len\":12},\"arrays\":") +
         arrays_json + "}";
}

bool tensors_equal(const Tensor& a, const Tensor& b) {
  return a.shape == b.shape && *a.data == *b.data;
}

}  // namespace

TEST_CASE("checkpoint: encoder round trip is bit-identical") {
  const encoder::ModelConfig config = small_config();
  Rng rng(42);
  const encoder::EncoderParams params = encoder::EncoderParams::init(config,
                                                                     rng);
  Checkpoint ckpt = from_encoder(config, params);
  ckpt.extra["seed"] = "42";
  const std::string path = tmp_path("enc.ckpt");
  save_checkpoint(path, ckpt);

  const Checkpoint loaded = load_checkpoint(path);
  CHECK(loaded.config.k == config.k);
  CHECK(loaded.config.d_model == config.d_model);
  CHECK(loaded.config.n_layers == config.n_layers);
  CHECK((loaded.config.insert_layers == config.insert_layers));
  CHECK(loaded.config.vocab_size == config.vocab_size);
  CHECK(loaded.config.lambda == config.lambda);
  CHECK(loaded.extra.at("seed") == "42");
  CHECK(loaded.extra.at("phase") == "pretrain");

  const encoder::EncoderParams restored = to_encoder(loaded);
  const auto orig = params.named_params();
  const auto back = restored.named_params();
  REQUIRE(orig.size() == back.size());
  std::size_t checked = 0;
  for (std::size_t i = 0; i < orig.size(); ++i) {
    CHECK(orig[i].first == back[i].first);
    CHECK(tensors_equal(*orig[i].second, *back[i].second));
    ++checked;
  }
  CHECK(checked > 20);

  // Two saves of the same checkpoint produce identical bytes, and the
  // temp file used for atomic replacement is gone.
  const std::string path2 = tmp_path("enc2.ckpt");
  save_checkpoint(path2, ckpt);
  CHECK((read_bytes(path) == read_bytes(path2)));
  CHECK(!fs::exists(path + ".tmp"));

  // Saving over an existing file replaces it; identical content (the
  // restored parameters plus the same metadata) gives identical bytes.
  Checkpoint again = from_encoder(config, restored);
  again.extra["seed"] = "42";
  save_checkpoint(path2, again);
  CHECK((read_bytes(path) == read_bytes(path2)));
}

TEST_CASE("checkpoint: on-disk layout has magic, version, sane manifest") {
  const encoder::ModelConfig config = small_config();
  Rng rng(7);
  Checkpoint ckpt = from_encoder(config,
                                 encoder::EncoderParams::init(config, rng));
  const std::string path = tmp_path("layout.ckpt");
  save_checkpoint(path, ckpt);
  const std::string bytes = read_bytes(path);

  REQUIRE(bytes.size() > 16);
  CHECK(bytes.substr(0, 4) == "MCLS");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  std::uint32_t version = 0;
  for (int i = 0; i < 4; ++i) version |= std::uint32_t(p[4 + i]) << (8 * i);
  CHECK(version == kFormatVersion);
  std::uint64_t header_len = 0;
  for (int i = 0; i < 8; ++i) header_len |= std::uint64_t(p[8 + i]) << (8 * i);
  REQUIRE(16 + header_len < bytes.size());

  // Header parses as JSON and the payload is exactly the manifest total.
  const std::string header = bytes.substr(16, header_len);
  CHECK(header.front() == '{');
  CHECK(header.find("\"arrays\"") != std::string::npos);
  CHECK(header.find("\"model\"") != std::string::npos);
  CHECK(header.find("\"dtype\":\"f64\"") != std::string::npos);
  std::uint64_t total = 0;
  for (const auto& [name, t] : ckpt.arrays) {
    (void)name;
    total += 8 * t.data->size();
  }
  CHECK(bytes.size() == 16 + header_len + total);

  // Flipping one payload byte changes a loaded value but nothing else.
  std::string corrupted = bytes;
  corrupted[16 + header_len] = char(corrupted[16 + header_len] ^ 0x01);
  const std::string cpath = tmp_path("layout_flip.ckpt");
  write_bytes(cpath, corrupted);
  const Checkpoint flipped = load_checkpoint(cpath);
  REQUIRE(flipped.arrays.size() == ckpt.arrays.size());
  CHECK((*flipped.arrays[0].second.data != *ckpt.arrays[0].second.data));
  bool rest_equal = true;
  for (std::size_t i = 1; i < ckpt.arrays.size(); ++i) {
    rest_equal = rest_equal && tensors_equal(flipped.arrays[i].second,
                                             ckpt.arrays[i].second);
  }
  CHECK(rest_equal);
}

TEST_CASE("checkpoint: corrupt files are rejected with clear errors") {
  const std::string good_header = header_with_arrays(
      "[{\"name\":\"a\",\"dtype\":\"f64\",\"shape\":[2],\"offset\":0}]");
  const std::string payload = le_doubles({1.5, -2.5});

  auto write_raw = [&](const std::string& name, const std::string& bytes) {
    const std::string path = tmp_path(name);
    write_bytes(path, bytes);
    return path;
  };

  // The reference file itself loads.
  const Checkpoint ok =
      load_checkpoint(write_raw("ok.ckpt", raw_file(1, good_header, payload)));
  REQUIRE(ok.arrays.size() == 1);
  CHECK(ok.arrays[0].first == "a");
  CHECK((*ok.arrays[0].second.data == std::vector<double>{1.5, -2.5}));

  CHECK_THROWS_AS(load_checkpoint(tmp_path("missing.ckpt")), IoError);
  CHECK_THROWS_AS(load_checkpoint(write_raw("tiny.ckpt", "MCLS")), InputError);
  {
    std::string bad = raw_file(1, good_header, payload);
    bad[0] = 'X';
    CHECK_THROWS_WITH_AS(load_checkpoint(write_raw("magic.ckpt", bad)),
                         doctest::Contains("bad magic"), InputError);
  }
  CHECK_THROWS_WITH_AS(
      load_checkpoint(write_raw("ver.ckpt", raw_file(9, good_header, payload))),
      doctest::Contains("version"), InputError);
  {
    // Header length pointing past the end of the file.
    std::string bad = raw_file(1, good_header, "");
    bad[8] = char(0xff);
    bad[9] = char(0xff);
    CHECK_THROWS_WITH_AS(load_checkpoint(write_raw("hlen.ckpt", bad)),
                         doctest::Contains("header length"), InputError);
  }
  CHECK_THROWS_WITH_AS(
      load_checkpoint(
          write_raw("json.ckpt", raw_file(1, "{not json", payload))),
      doctest::Contains("invalid header JSON"), InputError);
  CHECK_THROWS_WITH_AS(
      load_checkpoint(write_raw(
          "unknown.ckpt",
          raw_file(1,
                   std::string("{\"model\":{},\"arrays\":[],\"bogus\":1}"),
                   ""))),
      doctest::Contains("bogus"), InputError);

  // Array extending past the payload.
  CHECK_THROWS_WITH_AS(
      load_checkpoint(write_raw(
          "oob.ckpt",
          raw_file(1,
                   header_with_arrays("[{\"name\":\"a\",\"dtype\":\"f64\","
                                      "\"shape\":[3],\"offset\":0}]"),
                   payload))),
      doctest::Contains("past the end"), InputError);

  // Two arrays whose extents overlap.
  CHECK_THROWS_WITH_AS(
      load_checkpoint(write_raw(
          "overlap.ckpt",
          raw_file(1,
                   header_with_arrays(
                       "[{\"name\":\"a\",\"dtype\":\"f64\",\"shape\":[2],"
                       "\"offset\":0},{\"name\":\"b\",\"dtype\":\"f64\","
                       "\"shape\":[1],\"offset\":8}]"),
                   payload))),
      doctest::Contains("overlap"), InputError);

  // Non-overlapping gap-free pair is fine even when listed out of order.
  {
    const Checkpoint two = load_checkpoint(write_raw(
        "twoarr.ckpt",
        raw_file(1,
                 header_with_arrays(
                     "[{\"name\":\"b\",\"dtype\":\"f64\",\"shape\":[1],"
                     "\"offset\":8},{\"name\":\"a\",\"dtype\":\"f64\","
                     "\"shape\":[1],\"offset\":0}]"),
                 payload)));
    CHECK((*two.find("a")->data == std::vector<double>{1.5}));
    CHECK((*two.find("b")->data == std::vector<double>{-2.5}));
  }

  CHECK_THROWS_WITH_AS(
      load_checkpoint(write_raw(
          "dtype.ckpt",
          raw_file(1,
                   header_with_arrays("[{\"name\":\"a\",\"dtype\":\"f32\","
                                      "\"shape\":[2],\"offset\":0}]"),
                   payload))),
      doctest::Contains("dtype"), InputError);

  CHECK_THROWS_WITH_AS(
      load_checkpoint(write_raw(
          "dup.ckpt",
          raw_file(1,
                   header_with_arrays(
                       "[{\"name\":\"a\",\"dtype\":\"f64\",\"shape\":[1],"
                       "\"offset\":0},{\"name\":\"a\",\"dtype\":\"f64\","
                       "\"shape\":[1],\"offset\":8}]"),
                   payload))),
      doctest::Contains("duplicate"), InputError);

  // Truncated payload: the manifest promises more bytes than remain.
  {
    std::string bad = raw_file(1, good_header, payload);
    bad.resize(bad.size() - 4);
    CHECK_THROWS_WITH_AS(load_checkpoint(write_raw("trunc.ckpt", bad)),
                         doctest::Contains("past the end"), InputError);
  }

  CHECK_THROWS_AS(save_checkpoint(scratch_dir().string(), Checkpoint{}),
                  IoError);
}

TEST_CASE("checkpoint: encoder binding catches missing and extra arrays") {
  const encoder::ModelConfig config = small_config();
  Rng rng(5);
  const encoder::EncoderParams params = encoder::EncoderParams::init(config,
                                                                     rng);
  Checkpoint ckpt = from_encoder(config, params);

  Checkpoint missing = ckpt;
  missing.arrays.erase(missing.arrays.begin() + 3);
  CHECK_THROWS_AS(to_encoder(missing), InputError);

  Checkpoint extra = ckpt;
  extra.arrays.emplace_back("stray", Tensor::zeros({2, 2}));
  CHECK_THROWS_AS(to_encoder(extra), InputError);

  Checkpoint reshaped = ckpt;
  reshaped.arrays[0].second = Tensor::zeros({1, 2});
  CHECK_THROWS_AS(to_encoder(reshaped), ShapeError);

  // NaN and infinity survive the trip bit-exactly.
  Checkpoint weird = ckpt;
  (*weird.arrays[0].second.data)[0] = std::numeric_limits<double>::quiet_NaN();
  (*weird.arrays[0].second.data)[1] = -std::numeric_limits<double>::infinity();
  const std::string path = tmp_path("weird.ckpt");
  save_checkpoint(path, weird);
  const Checkpoint back = load_checkpoint(path);
  std::uint64_t nan_bits = 0, back_bits = 0;
  std::memcpy(&nan_bits, &(*weird.arrays[0].second.data)[0], 8);
  std::memcpy(&back_bits, &(*back.arrays[0].second.data)[0], 8);
  CHECK(nan_bits == back_bits);
  CHECK((*back.arrays[0].second.data)[1] ==
        -std::numeric_limits<double>::infinity());
}

TEST_CASE("checkpoint: fine-tuned model round trip preserves predictions") {
  encoder::ModelConfig config = small_config();
  Rng rng(19);
  const encoder::EncoderParams pre = encoder::EncoderParams::init(config, rng);

  finetune::TaskSpec task;
  task.kind = finetune::TaskKind::classification;
  task.n_classes = 2;
  task.metric = finetune::Metric::accuracy;
  for (int i = 0; i < 6; ++i) {
    finetune::Example e;
    e.sentence_a = {8 + i % 3, 9, 10};
    e.label = i % 2;
    task.train.push_back(e);
    task.dev.push_back(e);
  }
  const finetune::FinetuneConfig fcfg{.steps = 3,
                                      .batch_size = 4,
                                      .lr = 1e-3,
                                      .warmup_ratio = 0.1,
                                      .eval_every = 2,
                                      .patience = 10};
  const finetune::FinetuneResult trained = finetune::finetune(
      pre, config, task, fcfg, finetune::Aggregation::reparam, 77);

  const Checkpoint ckpt = from_finetuned(trained.model);
  CHECK(ckpt.extra.at("phase") == "finetune");
  CHECK(ckpt.extra.at("aggregation") == "reparam");
  CHECK(ckpt.extra.at("kind") == "classification");
  CHECK(ckpt.extra.at("n_classes") == "2");
  const std::string path = tmp_path("model.ckpt");
  save_checkpoint(path, ckpt);

  const finetune::FinetunedModel restored = to_finetuned(load_checkpoint(path));
  CHECK(restored.aggregation == finetune::Aggregation::reparam);
  CHECK(restored.kind == finetune::TaskKind::classification);
  CHECK(restored.n_classes == 2);
  CHECK(tensors_equal(restored.agg_w, trained.model.agg_w));
  CHECK(tensors_equal(restored.cls_w, trained.model.cls_w));
  CHECK(tensors_equal(restored.cls_b, trained.model.cls_b));

  const auto before = finetune::predict(trained.model, task.dev);
  const auto after = finetune::predict(restored, task.dev);
  REQUIRE(before.size() == after.size());
  for (std::size_t i = 0; i < before.size(); ++i) {
    CHECK((before[i].probs == after[i].probs));
  }

  // A pretraining checkpoint is not accepted as a fine-tuned model.
  Rng rng2(3);
  const Checkpoint plain =
      from_encoder(config, encoder::EncoderParams::init(config, rng2));
  const std::string plain_path = tmp_path("plain.ckpt");
  save_checkpoint(plain_path, plain);
  CHECK_THROWS_AS(to_finetuned(load_checkpoint(plain_path)), InputError);
  // Nor the reverse.
  CHECK_THROWS_AS(to_encoder(load_checkpoint(path)), InputError);
}

TEST_CASE("run config: defaults, full round trip, and strictness") {
  using cli::RunConfig;

  const RunConfig defaults = RunConfig::parse("{}");
  CHECK(defaults.pretrain.steps == 1000);
  CHECK(defaults.pretrain.batch_rows == 12);
  CHECK(defaults.finetune.steps == 300);
  CHECK(defaults.finetune.patience == 10);
  CHECK(defaults.model.k == 5);
  CHECK(defaults.seeds.pretrain == 1);

  const std::string text = R"({
    "model": {"k": 3, "d_model": 32, "vocab_size": 512,
              "loss_weights": {"mcqt": 0.5}},
    "pretrain": {"steps": 50, "batch_size": 9, "lr": 1e-3,
                 "warmup_ratio": 0.05, "mask_prob": 0.2, "swap_prob": 0.4,
                 "mode": "two_part"},
    "finetune": {"steps": 120, "batch_size": 8, "lr": 2e-3, "patience": 4},
    "seeds": {"pretrain": 11, "finetune": 12},
    "paths": {"corpus": "data", "out": "run.ckpt"}
  })";
  const RunConfig cfg = RunConfig::parse(text);
  CHECK(cfg.model.k == 3);
  CHECK(cfg.model.d_model == 32);
  CHECK(cfg.model.vocab_size == 512);
  CHECK(cfg.model.loss_weights.mcqt == 0.5);
  CHECK(cfg.model.loss_weights.mlm == 1.0);  // untouched default
  CHECK(cfg.pretrain.steps == 50);
  CHECK(cfg.pretrain.batch_rows == 9);
  CHECK(cfg.pretrain.mode == textpipe::BatchMode::two_part);
  CHECK(cfg.finetune.steps == 120);
  CHECK(cfg.finetune.lr == 2e-3);
  CHECK(cfg.finetune.patience == 4);
  CHECK(cfg.seeds.pretrain == 11);
  CHECK(cfg.seeds.finetune == 12);
  CHECK(cfg.paths.corpus == "data");
  CHECK(cfg.paths.out == "run.ckpt");

  // Save -> load reproduces every field (compare canonical dumps).
  const std::string path = tmp_path("run.json");
  cfg.save(path);
  const RunConfig loaded = RunConfig::load(path);
  CHECK(loaded.to_json_text() == cfg.to_json_text());
  CHECK(loaded.content_hash() == cfg.content_hash());

  CHECK_THROWS_WITH_AS(RunConfig::parse("{\"models\": {}}"),
                       doctest::Contains("models"), InputError);
  CHECK_THROWS_WITH_AS(RunConfig::parse("{\"pretrain\": {\"step\": 5}}"),
                       doctest::Contains("step"), InputError);
  CHECK_THROWS_WITH_AS(
      RunConfig::parse("{\"model\": {\"loss_weights\": {\"qt\": 1}}}"),
      doctest::Contains("qt"), InputError);
  CHECK_THROWS_AS(RunConfig::parse("{\"pretrain\": {\"steps\": \"ten\"}}"),
                  InputError);
  CHECK_THROWS_AS(RunConfig::parse("{\"pretrain\": {\"steps\": -1}}"),
                  InputError);
  CHECK_THROWS_AS(RunConfig::parse("{\"pretrain\": {\"batch_size\": 0}}"),
                  InputError);
  CHECK_THROWS_AS(RunConfig::parse("{\"pretrain\": {\"lr\": 0}}"), InputError);
  CHECK_THROWS_AS(RunConfig::parse("{\"pretrain\": {\"mask_prob\": 1.5}}"),
                  InputError);
  CHECK_THROWS_AS(RunConfig::parse("{\"pretrain\": {\"mode\": \"four\"}}"),
                  InputError);
  CHECK_THROWS_AS(RunConfig::parse("{\"finetune\": {\"patience\": 0}}"),
                  InputError);
  CHECK_THROWS_AS(RunConfig::parse("{\"seeds\": {\"pretrain\": -4}}"),
                  InputError);
  CHECK_THROWS_AS(RunConfig::parse("{\"seeds\": {\"pretrain\": 1.5}}"),
                  InputError);
  CHECK_THROWS_AS(RunConfig::parse("{\"paths\": {\"corpus\": 7}}"), InputError);
  CHECK_THROWS_AS(RunConfig::parse("not json"), InputError);
  CHECK_THROWS_AS(RunConfig::load(tmp_path("nope.json")), IoError);
}

TEST_CASE("run config: content hash tracks content, not formatting") {
  using cli::RunConfig;
  const RunConfig a =
      RunConfig::parse("{\"pretrain\": {\"steps\": 7, \"lr\": 0.001}}");
  const RunConfig b =
      RunConfig::parse("{\"pretrain\": {\"lr\": 1e-3,   \"steps\": 7}}");
  CHECK(a.content_hash() == b.content_hash());
  CHECK(a.content_hash().size() == 16);

  const RunConfig c = RunConfig::parse("{\"pretrain\": {\"steps\": 8}}");
  CHECK(a.content_hash() != c.content_hash());

  const RunConfig d = RunConfig::parse("{\"seeds\": {\"pretrain\": 2}}");
  const RunConfig e = RunConfig::parse("{\"seeds\": {\"pretrain\": 3}}");
  CHECK(d.content_hash() != e.content_hash());
}

TEST_CASE("log: level parsing and gating") {
  using namespace mcls::log;
  CHECK(parse_level("error") == Level::error);
  CHECK(parse_level("info") == Level::info);
  CHECK(parse_level("debug") == Level::debug);
  CHECK_THROWS_AS(parse_level("verbose"), InputError);
  CHECK(level_name(Level::debug) == "debug");

  const Level saved = level();
  set_level(Level::error);
  CHECK(enabled(Level::error));
  CHECK(!enabled(Level::info));
  CHECK(!enabled(Level::debug));
  set_level(Level::debug);
  CHECK(enabled(Level::info));
  CHECK(enabled(Level::debug));
  set_level(saved);
}
