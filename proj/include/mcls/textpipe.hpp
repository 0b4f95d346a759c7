#pragma once

// Corpus ingestion, toy tokenizer/vocabulary, and contrastive batch
// construction: two-part (anchor/positive) and three-part
// (anchor/positive/hard-negative) batches with sentence-order labels,
// masked-token targets, and tf-idf importance targets.

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "mcls/rng.hpp"

namespace mcls::textpipe {

// Tokenized text before vocabulary lookup.
using RawSentence = std::vector<std::string>;
using RawDocument = std::vector<RawSentence>;

// After vocabulary lookup: sentences are id sequences.
using Sentence = std::vector<int>;
using Document = std::vector<Sentence>;

// Splits UTF-8 text into documents (blank-line separated), sentences
// (newline separated), and lowercase whitespace tokens.  Undecodable bytes
// raise IngestError naming the byte offset.
std::vector<RawDocument> segment_documents(const std::string& raw_text);

// Reads and segments each file, concatenating the resulting documents.
std::vector<RawDocument> load_corpus(const std::vector<std::string>& paths);

class Vocabulary {
 public:
  // Reserved ids; the block is [PAD][MASK][SEP][CLS0][C1..CK][UNK].
  static constexpr int kPad = 0;
  static constexpr int kMask = 1;
  static constexpr int kSep = 2;
  static constexpr int kCls0 = 3;

  Vocabulary() = default;
  Vocabulary(int k, std::vector<std::string> id_to_token);

  int k() const { return k_; }
  int size() const { return static_cast<int>(id_to_token_.size()); }
  int n_reserved() const { return k_ + 5; }
  int cls_id(int j) const;  // j in 1..k -> id of [Cj]
  int unk_id() const { return k_ + 4; }

  // Raw token -> id; unknown tokens map to [UNK].
  int lookup(const std::string& token) const;
  const std::string& token(int id) const;

  Document encode(const RawDocument& doc) const;
  std::vector<Document> encode(const std::vector<RawDocument>& docs) const;

  // Serialized as UTF-8 lines "token<TAB>id".
  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

 private:
  int k_ = 0;
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> token_to_id_;
};

// Reserved tokens first, then corpus tokens by descending frequency with
// lexicographic tie-break, capped at max_size total entries.
Vocabulary build_vocab(const std::vector<RawDocument>& docs, int max_size,
                       int k);
Vocabulary build_vocab_from_files(const std::vector<std::string>& paths,
                                  int max_size, int k);

struct TfidfTable {
  std::vector<double> idf;  // indexed by token id; unused reserved ids -> 0
  int n_docs = 0;
};

// idf(t) = ln((1 + n_docs) / (1 + df(t))) + 1, df counted over documents.
TfidfTable build_tfidf_table(const Vocabulary& vocab,
                             const std::vector<Document>& docs);

enum class BatchMode { two_part, three_part };

BatchMode parse_batch_mode(const std::string& name);
std::string batch_mode_name(BatchMode mode);

struct MlmTarget {
  int row = 0;
  int pos = 0;
  int original_id = 0;
};

struct ContrastiveBatch {
  int rows = 0;
  int cols = 0;
  int n_cls = 0;  // K
  BatchMode mode = BatchMode::two_part;
  std::vector<int> token_ids;        // rows * cols, row-major
  std::vector<double> attention_mask;  // rows * cols, 1.0 where not [PAD]
  std::vector<int> part_boundaries;  // {B/2} or {B/3, 2B/3}
  std::vector<int> cls_positions;    // {0, 1, ..., K}
  std::vector<MlmTarget> mlm_targets;
  std::vector<int> so_labels;  // per row; 1 iff sentences were swapped
  bool has_tfidf = false;
  std::vector<double> tfidf_targets;  // rows * cols when has_tfidf

  int n_parts() const { return mode == BatchMode::three_part ? 3 : 2; }
  int part_rows() const { return rows / n_parts(); }
  int id_at(int row, int col) const {
    return token_ids[static_cast<std::size_t>(row) * cols + col];
  }
};

// Samples part_rows() documents without replacement, takes three (or two)
// consecutive 2-sentence sequences from each, and encodes every sequence as
// [CLS0][C1..CK] s_a [SEP] s_b padded to length L.  No swap or masking is
// applied here; see the apply_* passes below.
ContrastiveBatch build_contrastive_batch(const std::vector<Document>& docs,
                                         const Vocabulary& vocab, int batch_rows,
                                         int max_len, BatchMode mode,
                                         const Rng& rng);

// Per row, with probability swap_prob the two sentences exchange places
// around [SEP] and the row's so_label becomes 1.
void apply_sentence_order_swap(ContrastiveBatch& batch, double swap_prob,
                               const Rng& rng);

// Selects non-special positions independently with probability mask_prob;
// 80% become [MASK], 10% a random text token, 10% stay unchanged.  Original
// ids are recorded as targets.
void apply_mlm_masking(ContrastiveBatch& batch, int vocab_size,
                       double mask_prob, const Rng& rng);

// Token ids with MLM masking undone (originals restored from mlm_targets).
std::vector<int> original_token_ids(const ContrastiveBatch& batch);

// weight(row, pos) = tf(token within row) * idf(token), min-max normalized
// per row to [0, 1]; special positions get 0.  Counts use the pre-masking
// token ids reconstructed from mlm_targets.
void compute_tfidf_targets(ContrastiveBatch& batch, const TfidfTable& table);

struct BatchOptions {
  double swap_prob = 0.0;
  double mask_prob = 0.0;
  const TfidfTable* tfidf = nullptr;  // non-null -> tfidf targets filled
};

// build + swap + mask + tfidf in the canonical order, all substreams derived
// from one base rng so the result is a pure function of (docs, config, seed).
ContrastiveBatch make_training_batch(const std::vector<Document>& docs,
                                     const Vocabulary& vocab, int batch_rows,
                                     int max_len, BatchMode mode,
                                     const BatchOptions& options,
                                     const Rng& rng);

}  // namespace mcls::textpipe
