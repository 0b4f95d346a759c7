#include "mcls/textpipe.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "mcls/errors.hpp"

namespace mcls::textpipe {

namespace {

void validate_utf8(const std::string& s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const unsigned char lead = static_cast<unsigned char>(s[i]);
    std::size_t extra = 0;
    unsigned long cp_min = 0;
    if (lead < 0x80) {
      ++i;
      continue;
    } else if ((lead & 0xE0) == 0xC0) {
      extra = 1;
      cp_min = 0x80;
    } else if ((lead & 0xF0) == 0xE0) {
      extra = 2;
      cp_min = 0x800;
    } else if ((lead & 0xF8) == 0xF0) {
      extra = 3;
      cp_min = 0x10000;
    } else {
      throw IngestError("invalid UTF-8 lead byte at offset " + std::to_string(i));
    }
    if (i + extra >= s.size()) {
      throw IngestError("truncated UTF-8 sequence at offset " + std::to_string(i));
    }
    unsigned long cp = lead & (0x3F >> extra);
    for (std::size_t j = 1; j <= extra; ++j) {
      const unsigned char c = static_cast<unsigned char>(s[i + j]);
      if ((c & 0xC0) != 0x80) {
        throw IngestError("invalid UTF-8 continuation byte at offset " +
                          std::to_string(i + j));
      }
      cp = (cp << 6) | (c & 0x3F);
    }
    if (cp < cp_min || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) {
      throw IngestError("invalid UTF-8 code point at offset " + std::to_string(i));
    }
    i += extra + 1;
  }
}

bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\r' || c == '\v' || c == '\f';
}

char ascii_lower(char c) {
  return (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : c;
}

RawSentence tokenize_line(const std::string& line) {
  RawSentence tokens;
  std::string cur;
  for (const char c : line) {
    if (is_space(c)) {
      if (!cur.empty()) {
        tokens.push_back(cur);
        cur.clear();
      }
    } else {
      cur.push_back(ascii_lower(c));
    }
  }
  if (!cur.empty()) tokens.push_back(cur);
  return tokens;
}

std::vector<std::string> reserved_tokens(int k) {
  std::vector<std::string> r{"[PAD]", "[MASK]", "[SEP]", "[CLS0]"};
  for (int j = 1; j <= k; ++j) r.push_back("[C" + std::to_string(j) + "]");
  r.push_back("[UNK]");
  return r;
}

}  // namespace

std::vector<RawDocument> segment_documents(const std::string& raw_text) {
  validate_utf8(raw_text);
  std::vector<RawDocument> docs;
  RawDocument current;
  std::size_t start = 0;
  auto flush_doc = [&]() {
    if (!current.empty()) {
      docs.push_back(std::move(current));
      current.clear();
    }
  };
  while (start <= raw_text.size()) {
    const std::size_t end = raw_text.find('\n', start);
    const std::string line = raw_text.substr(
        start, end == std::string::npos ? std::string::npos : end - start);
    RawSentence tokens = tokenize_line(line);
    if (tokens.empty()) {
      flush_doc();  // blank line: document boundary
    } else {
      current.push_back(std::move(tokens));
    }
    if (end == std::string::npos) break;
    start = end + 1;
  }
  flush_doc();
  return docs;
}

std::vector<RawDocument> load_corpus(const std::vector<std::string>& paths) {
  if (paths.empty()) throw IngestError("no corpus files given");
  std::vector<RawDocument> all;
  for (const std::string& path : paths) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestError("cannot open corpus file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    std::vector<RawDocument> docs = segment_documents(buf.str());
    all.insert(all.end(), std::make_move_iterator(docs.begin()),
               std::make_move_iterator(docs.end()));
  }
  return all;
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

Vocabulary::Vocabulary(int k, std::vector<std::string> id_to_token)
    : k_(k), id_to_token_(std::move(id_to_token)) {
  if (k_ < 1) throw ConfigError("vocabulary: K must be >= 1");
  const std::vector<std::string> reserved = reserved_tokens(k_);
  if (id_to_token_.size() < reserved.size()) {
    throw ConfigError("vocabulary: fewer entries than reserved tokens");
  }
  for (std::size_t i = 0; i < reserved.size(); ++i) {
    if (id_to_token_[i] != reserved[i]) {
      throw ConfigError("vocabulary: reserved slot " + std::to_string(i) +
                        " holds '" + id_to_token_[i] + "', expected '" +
                        reserved[i] + "'");
    }
  }
  for (std::size_t i = 0; i < id_to_token_.size(); ++i) {
    if (!token_to_id_.emplace(id_to_token_[i], static_cast<int>(i)).second) {
      throw ConfigError("vocabulary: duplicate token '" + id_to_token_[i] + "'");
    }
  }
}

int Vocabulary::cls_id(int j) const {
  if (j < 1 || j > k_) {
    throw IndexError("cls_id: index " + std::to_string(j) + " outside [1, " +
                     std::to_string(k_) + "]");
  }
  return kCls0 + j;
}

int Vocabulary::lookup(const std::string& token) const {
  const auto it = token_to_id_.find(token);
  return it == token_to_id_.end() ? unk_id() : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) {
    throw IndexError("vocabulary: id " + std::to_string(id) + " out of range");
  }
  return id_to_token_[static_cast<std::size_t>(id)];
}

Document Vocabulary::encode(const RawDocument& doc) const {
  Document out;
  out.reserve(doc.size());
  for (const RawSentence& sent : doc) {
    Sentence ids;
    ids.reserve(sent.size());
    for (const std::string& tok : sent) ids.push_back(lookup(tok));
    out.push_back(std::move(ids));
  }
  return out;
}

std::vector<Document> Vocabulary::encode(
    const std::vector<RawDocument>& docs) const {
  std::vector<Document> out;
  out.reserve(docs.size());
  for (const RawDocument& d : docs) out.push_back(encode(d));
  return out;
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write vocabulary file: " + path);
  for (int id = 0; id < size(); ++id) {
    out << id_to_token_[static_cast<std::size_t>(id)] << '\t' << id << '\n';
  }
  if (!out) throw IoError("failed writing vocabulary file: " + path);
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open vocabulary file: " + path);
  std::vector<std::string> id_to_token;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const std::size_t tab = line.find('\t');
    if (tab == std::string::npos) {
      throw IngestError("vocabulary file " + path + " line " +
                        std::to_string(line_no) + ": missing tab");
    }
    const std::string token = line.substr(0, tab);
    int id = 0;
    try {
      id = std::stoi(line.substr(tab + 1));
    } catch (const std::exception&) {
      throw IngestError("vocabulary file " + path + " line " +
                        std::to_string(line_no) + ": bad id");
    }
    if (id != static_cast<int>(id_to_token.size())) {
      throw IngestError("vocabulary file " + path + " line " +
                        std::to_string(line_no) + ": ids must be contiguous");
    }
    id_to_token.push_back(token);
  }
  // K is recovered from the position of [UNK], which closes the reserved block.
  const auto it = std::find(id_to_token.begin(), id_to_token.end(), "[UNK]");
  if (it == id_to_token.end()) {
    throw IngestError("vocabulary file " + path + ": no [UNK] entry");
  }
  const int k = static_cast<int>(it - id_to_token.begin()) - 4;
  return Vocabulary(k, std::move(id_to_token));
}

Vocabulary build_vocab(const std::vector<RawDocument>& docs, int max_size,
                       int k) {
  if (k < 1) throw ConfigError("build_vocab: K must be >= 1");
  if (max_size <= k + 8) {
    throw ConfigError("build_vocab: max_size must exceed K + 8");
  }
  std::unordered_map<std::string, long> counts;
  for (const RawDocument& doc : docs) {
    for (const RawSentence& sent : doc) {
      for (const std::string& tok : sent) ++counts[tok];
    }
  }
  if (counts.empty()) throw IngestError("build_vocab: empty corpus");
  std::vector<std::pair<std::string, long>> by_freq(counts.begin(), counts.end());
  std::sort(by_freq.begin(), by_freq.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  std::vector<std::string> id_to_token = reserved_tokens(k);
  const std::size_t text_slots =
      static_cast<std::size_t>(max_size) - id_to_token.size();
  for (std::size_t i = 0; i < by_freq.size() && i < text_slots; ++i) {
    id_to_token.push_back(by_freq[i].first);
  }
  return Vocabulary(k, std::move(id_to_token));
}

Vocabulary build_vocab_from_files(const std::vector<std::string>& paths,
                                  int max_size, int k) {
  return build_vocab(load_corpus(paths), max_size, k);
}

TfidfTable build_tfidf_table(const Vocabulary& vocab,
                             const std::vector<Document>& docs) {
  TfidfTable table;
  table.n_docs = static_cast<int>(docs.size());
  table.idf.assign(static_cast<std::size_t>(vocab.size()), 0.0);
  std::vector<int> df(static_cast<std::size_t>(vocab.size()), 0);
  std::vector<bool> seen(static_cast<std::size_t>(vocab.size()), false);
  for (const Document& doc : docs) {
    std::fill(seen.begin(), seen.end(), false);
    for (const Sentence& sent : doc) {
      for (const int id : sent) {
        if (id < 0 || id >= vocab.size()) {
          throw IndexError("build_tfidf_table: id " + std::to_string(id) +
                           " out of range");
        }
        if (!seen[static_cast<std::size_t>(id)]) {
          seen[static_cast<std::size_t>(id)] = true;
          ++df[static_cast<std::size_t>(id)];
        }
      }
    }
  }
  for (int id = 0; id < vocab.size(); ++id) {
    const bool text_like = id == vocab.unk_id() || id >= vocab.n_reserved();
    if (!text_like) continue;
    table.idf[static_cast<std::size_t>(id)] =
        std::log((1.0 + table.n_docs) / (1.0 + df[static_cast<std::size_t>(id)])) +
        1.0;
  }
  return table;
}

// ---------------------------------------------------------------------------
// Batch construction
// ---------------------------------------------------------------------------

BatchMode parse_batch_mode(const std::string& name) {
  if (name == "two_part") return BatchMode::two_part;
  if (name == "three_part") return BatchMode::three_part;
  throw ConfigError("unknown batch mode: " + name);
}

std::string batch_mode_name(BatchMode mode) {
  return mode == BatchMode::two_part ? "two_part" : "three_part";
}

namespace {

// [CLS0][C1..CK] a [SEP] b, trimmed to fit then padded to max_len.  The
// longer sentence loses its last token first; ties trim the second sentence.
std::vector<int> encode_sequence(const Vocabulary& vocab, Sentence a,
                                 Sentence b, int max_len) {
  const int k = vocab.k();
  const std::size_t avail = static_cast<std::size_t>(max_len - (k + 1) - 1);
  while (a.size() + b.size() > avail) {
    if (a.size() > b.size()) {
      a.pop_back();
    } else {
      b.pop_back();
    }
  }
  std::vector<int> row;
  row.reserve(static_cast<std::size_t>(max_len));
  row.push_back(Vocabulary::kCls0);
  for (int j = 1; j <= k; ++j) row.push_back(vocab.cls_id(j));
  row.insert(row.end(), a.begin(), a.end());
  row.push_back(Vocabulary::kSep);
  row.insert(row.end(), b.begin(), b.end());
  row.resize(static_cast<std::size_t>(max_len), Vocabulary::kPad);
  return row;
}

}  // namespace

ContrastiveBatch build_contrastive_batch(const std::vector<Document>& docs,
                                         const Vocabulary& vocab,
                                         int batch_rows, int max_len,
                                         BatchMode mode, const Rng& rng) {
  const int n_parts = mode == BatchMode::three_part ? 3 : 2;
  if (batch_rows <= 0 || batch_rows % n_parts != 0) {
    throw ConfigError("batch size " + std::to_string(batch_rows) +
                      " not divisible by " + std::to_string(n_parts));
  }
  const int k = vocab.k();
  if (max_len < k + 4) {
    throw ConfigError("max_len " + std::to_string(max_len) +
                      " leaves no room for two sentences after " +
                      std::to_string(k + 1) + " CLS tokens and [SEP]");
  }
  const int need_sentences = 2 * n_parts;
  std::vector<int> eligible;
  for (std::size_t d = 0; d < docs.size(); ++d) {
    bool ok = static_cast<int>(docs[d].size()) >= need_sentences;
    for (const Sentence& s : docs[d]) ok = ok && !s.empty();
    if (ok) eligible.push_back(static_cast<int>(d));
  }
  const int n = batch_rows / n_parts;
  if (static_cast<int>(eligible.size()) < n) {
    throw SamplingError("need " + std::to_string(n) + " documents with >= " +
                        std::to_string(need_sentences) + " sentences, corpus has " +
                        std::to_string(eligible.size()));
  }

  Rng sample = rng.substream("sample");
  // Partial Fisher-Yates: first n entries become the without-replacement draw.
  for (int i = 0; i < n; ++i) {
    const std::size_t j =
        static_cast<std::size_t>(i) + sample.below(eligible.size() - i);
    std::swap(eligible[static_cast<std::size_t>(i)], eligible[j]);
  }

  ContrastiveBatch batch;
  batch.rows = batch_rows;
  batch.cols = max_len;
  batch.n_cls = k;
  batch.mode = mode;
  batch.token_ids.assign(static_cast<std::size_t>(batch_rows) * max_len,
                         Vocabulary::kPad);
  batch.attention_mask.assign(batch.token_ids.size(), 0.0);
  for (int p = 1; p < n_parts; ++p) batch.part_boundaries.push_back(p * n);
  for (int j = 0; j <= k; ++j) batch.cls_positions.push_back(j);
  batch.so_labels.assign(static_cast<std::size_t>(batch_rows), 0);

  for (int i = 0; i < n; ++i) {
    const Document& doc = docs[static_cast<std::size_t>(eligible[i])];
    const int n_sent = static_cast<int>(doc.size());
    const int start =
        static_cast<int>(sample.below(static_cast<std::uint64_t>(
            n_sent - need_sentences + 1)));
    for (int p = 0; p < n_parts; ++p) {
      const std::vector<int> row = encode_sequence(
          vocab, doc[static_cast<std::size_t>(start + 2 * p)],
          doc[static_cast<std::size_t>(start + 2 * p + 1)], max_len);
      const std::size_t base = (static_cast<std::size_t>(p) * n + i) *
                               static_cast<std::size_t>(max_len);
      for (int c = 0; c < max_len; ++c) {
        batch.token_ids[base + c] = row[static_cast<std::size_t>(c)];
        batch.attention_mask[base + c] =
            row[static_cast<std::size_t>(c)] == Vocabulary::kPad ? 0.0 : 1.0;
      }
    }
  }
  return batch;
}

void apply_sentence_order_swap(ContrastiveBatch& batch, double swap_prob,
                               const Rng& rng) {
  if (swap_prob < 0.0 || swap_prob > 1.0) {
    throw ConfigError("swap_prob must be in [0, 1]");
  }
  Rng sw = rng.substream("swap");
  const int k = batch.n_cls;
  for (int r = 0; r < batch.rows; ++r) {
    const bool swap = sw.next_double() < swap_prob;
    batch.so_labels[static_cast<std::size_t>(r)] = swap ? 1 : 0;
    if (!swap) continue;
    const std::size_t base = static_cast<std::size_t>(r) * batch.cols;
    int sep = -1;
    for (int c = k + 1; c < batch.cols; ++c) {
      if (batch.token_ids[base + c] == Vocabulary::kSep) {
        sep = c;
        break;
      }
    }
    if (sep < 0) throw InputError("row " + std::to_string(r) + " has no [SEP]");
    int end = batch.cols;
    while (end > sep + 1 && batch.token_ids[base + end - 1] == Vocabulary::kPad) {
      --end;
    }
    std::vector<int> swapped;
    swapped.reserve(static_cast<std::size_t>(batch.cols));
    for (int c = 0; c <= k; ++c) swapped.push_back(batch.token_ids[base + c]);
    for (int c = sep + 1; c < end; ++c) swapped.push_back(batch.token_ids[base + c]);
    swapped.push_back(Vocabulary::kSep);
    for (int c = k + 1; c < sep; ++c) swapped.push_back(batch.token_ids[base + c]);
    swapped.resize(static_cast<std::size_t>(batch.cols), Vocabulary::kPad);
    for (int c = 0; c < batch.cols; ++c) {
      batch.token_ids[base + c] = swapped[static_cast<std::size_t>(c)];
    }
  }
}

void apply_mlm_masking(ContrastiveBatch& batch, int vocab_size,
                       double mask_prob, const Rng& rng) {
  if (mask_prob < 0.0 || mask_prob >= 1.0) {
    throw ConfigError("mask_prob must be in [0, 1)");
  }
  const int n_reserved = batch.n_cls + 5;
  const int unk = batch.n_cls + 4;
  if (vocab_size < n_reserved) {
    throw ConfigError("vocab_size smaller than the reserved block");
  }
  Rng mr = rng.substream("mask");
  for (int r = 0; r < batch.rows; ++r) {
    const std::size_t base = static_cast<std::size_t>(r) * batch.cols;
    for (int c = 0; c < batch.cols; ++c) {
      const int id = batch.token_ids[base + c];
      const bool text_pos = id == unk || id >= n_reserved;
      if (!text_pos) continue;
      if (mr.next_double() >= mask_prob) continue;
      batch.mlm_targets.push_back({r, c, id});
      const double action = mr.next_double();
      if (action < 0.8) {
        batch.token_ids[base + c] = Vocabulary::kMask;
      } else if (action < 0.9 && vocab_size > n_reserved) {
        batch.token_ids[base + c] =
            n_reserved +
            static_cast<int>(mr.below(static_cast<std::uint64_t>(
                vocab_size - n_reserved)));
      }  // else: keep the original token
    }
  }
}

std::vector<int> original_token_ids(const ContrastiveBatch& batch) {
  std::vector<int> original = batch.token_ids;
  for (const MlmTarget& t : batch.mlm_targets) {
    original[static_cast<std::size_t>(t.row) * batch.cols + t.pos] =
        t.original_id;
  }
  return original;
}

void compute_tfidf_targets(ContrastiveBatch& batch, const TfidfTable& table) {
  const int n_reserved = batch.n_cls + 5;
  const int unk = batch.n_cls + 4;
  // tf counts use the pre-masking ids; masking noise must not move targets.
  const std::vector<int> original = original_token_ids(batch);
  batch.tfidf_targets.assign(batch.token_ids.size(), 0.0);
  std::unordered_map<int, int> tf;
  for (int r = 0; r < batch.rows; ++r) {
    const std::size_t base = static_cast<std::size_t>(r) * batch.cols;
    tf.clear();
    for (int c = 0; c < batch.cols; ++c) {
      const int id = original[base + c];
      if (id == unk || id >= n_reserved) ++tf[id];
    }
    double lo = 0.0, hi = 0.0;
    bool first = true;
    for (const auto& [id, count] : tf) {
      if (id >= static_cast<int>(table.idf.size())) {
        throw ConfigError("tfidf table does not cover token id " +
                          std::to_string(id));
      }
      const double w = count * table.idf[static_cast<std::size_t>(id)];
      lo = first ? w : std::min(lo, w);
      hi = first ? w : std::max(hi, w);
      first = false;
    }
    if (first || hi <= lo) continue;  // degenerate rows keep all-zero targets
    for (int c = 0; c < batch.cols; ++c) {
      const int id = original[base + c];
      if (id != unk && id < n_reserved) continue;
      const double w = tf[id] * table.idf[static_cast<std::size_t>(id)];
      batch.tfidf_targets[base + c] = (w - lo) / (hi - lo);
    }
  }
  batch.has_tfidf = true;
}

ContrastiveBatch make_training_batch(const std::vector<Document>& docs,
                                     const Vocabulary& vocab, int batch_rows,
                                     int max_len, BatchMode mode,
                                     const BatchOptions& options,
                                     const Rng& rng) {
  ContrastiveBatch batch =
      build_contrastive_batch(docs, vocab, batch_rows, max_len, mode, rng);
  apply_sentence_order_swap(batch, options.swap_prob, rng);
  apply_mlm_masking(batch, vocab.size(), options.mask_prob, rng);
  if (options.tfidf != nullptr) compute_tfidf_targets(batch, *options.tfidf);
  return batch;
}

}  // namespace mcls::textpipe
