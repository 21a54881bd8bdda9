#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace triad {

/// Organ-independent acquisition metadata.
struct ImagingMeta {
  std::string modality;  // T1w, T2w, FLAIR, DWI, DCE, ...
  std::optional<double> field_strength;  // tesla
  std::optional<double> tr_ms;
  std::optional<double> te_ms;
  std::optional<std::string> manufacturer;
  std::optional<std::string> sequence_name;

  void validate() const;
};

/// Tokens that must never appear in a description.
const std::vector<std::string>& organ_vocabulary();
bool mentions_organ(std::string_view text);

/// "MR <modality>; <B0>T; TR=<tr>ms; TE=<te>ms; <manufacturer>", absent
/// fields omitted. Numbers use the shortest round-trip decimal form, with
/// the field strength always carrying a decimal point.
std::string build_description(const ImagingMeta& meta);

struct TextEmbedding {
  std::vector<float> vector;
  std::string source_text;
};

/// Frozen text encoder contract: deterministic, fixed dimension, unit norm.
class TextEmbedder {
 public:
  virtual ~TextEmbedder() = default;
  virtual int dim() const = 0;
  virtual TextEmbedding embed(std::string_view text) const = 0;
};

/// Character-trigram signed feature hashing into `dim` buckets, then L2
/// normalisation. Text is framed with boundary markers so short strings
/// still produce trigrams.
class HashingEmbedder final : public TextEmbedder {
 public:
  explicit HashingEmbedder(int dim = 256);
  int dim() const override { return dim_; }
  TextEmbedding embed(std::string_view text) const override;

 private:
  int dim_;
};

/// Embeddings computed offline by an external model. The binary file holds
/// a one-line ASCII header "D N\n" followed by N*D little-endian float32
/// values, row r belonging to texts[r].
class ExternalEmbedder final : public TextEmbedder {
 public:
  ExternalEmbedder(const std::vector<std::string>& texts, const std::filesystem::path& file);
  int dim() const override { return dim_; }
  TextEmbedding embed(std::string_view text) const override;

 private:
  int dim_ = 0;
  std::map<std::string, std::vector<float>, std::less<>> rows_;
};

void write_embedding_file(const std::vector<TextEmbedding>& rows, const std::filesystem::path& file);

/// "hashing" or "external"; external also needs the embedding file and the
/// texts its rows correspond to.
std::unique_ptr<TextEmbedder> make_embedder(std::string_view provider, int dim, const std::vector<std::string>& texts = {},
                                            const std::filesystem::path& file = {});

/// Symmetric Euclidean distance matrix (row-major, n*n) with zero diagonal.
std::vector<double> pairwise_dist(std::span<const TextEmbedding> embeddings);

}  // namespace triad
