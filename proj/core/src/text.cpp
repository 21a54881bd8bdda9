#include "triad/text.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "triad/error.hpp"
#include "triad/hash.hpp"

namespace triad {
namespace {

std::string shortest(double x) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), x);
  return {buf, end};
}

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

void normalise(std::vector<float>& v) {
  double norm2 = 0.0;
  for (float x : v) norm2 += static_cast<double>(x) * x;
  const double inv = 1.0 / std::sqrt(norm2);
  for (float& x : v) x = static_cast<float>(x * inv);
}

}  // namespace

const std::vector<std::string>& organ_vocabulary() {
  static const std::vector<std::string> kOrgans{"brain", "breast", "prostate", "head", "neck", "knee", "liver", "heart", "cardiac",
                                                "kidney", "lung", "spine", "pelvis", "abdomen", "pancreas", "spleen", "colon", "hippocampus"};
  return kOrgans;
}

bool mentions_organ(std::string_view text) {
  const std::string t = lower(text);
  for (const auto& organ : organ_vocabulary()) {
    if (t.find(organ) != std::string::npos) return true;
  }
  return false;
}

void ImagingMeta::validate() const {
  if (modality.empty()) fail(ErrorKind::metadata, "modality is empty");
  if (field_strength && !(*field_strength > 0.0)) fail(ErrorKind::metadata, "field strength must be positive");
  if (tr_ms && !(*tr_ms > 0.0)) fail(ErrorKind::metadata, "TR must be positive");
  if (te_ms && !(*te_ms > 0.0)) fail(ErrorKind::metadata, "TE must be positive");
  for (const auto* s : {&modality, manufacturer ? &*manufacturer : nullptr, sequence_name ? &*sequence_name : nullptr}) {
    if (s == nullptr) continue;
    if (s->find(';') != std::string::npos) fail(ErrorKind::metadata, "metadata fields may not contain ';'");
    if (mentions_organ(*s)) fail(ErrorKind::metadata, "metadata field '" + *s + "' names an organ");
  }
  if (manufacturer && manufacturer->empty()) fail(ErrorKind::metadata, "manufacturer is empty");
}

std::string build_description(const ImagingMeta& meta) {
  meta.validate();
  std::string out = "MR " + meta.modality;
  if (meta.field_strength) {
    std::string b0 = shortest(*meta.field_strength);
    if (b0.find_first_of(".e") == std::string::npos) b0 += ".0";
    out += "; " + b0 + "T";
  }
  if (meta.tr_ms) out += "; TR=" + shortest(*meta.tr_ms) + "ms";
  if (meta.te_ms) out += "; TE=" + shortest(*meta.te_ms) + "ms";
  if (meta.manufacturer) out += "; " + *meta.manufacturer;
  return out;
}

HashingEmbedder::HashingEmbedder(int dim) : dim_(dim) {
  if (dim < 1) fail(ErrorKind::config, "embedding dimension must be positive");
}

TextEmbedding HashingEmbedder::embed(std::string_view text) const {
  if (text.empty()) fail(ErrorKind::input, "cannot embed empty text");
  std::string framed;
  framed.reserve(text.size() + 2);
  framed += '\x02';
  framed += text;
  framed += '\x03';
  std::vector<float> v(static_cast<std::size_t>(dim_), 0.0f);
  for (std::size_t n = 0; n + 3 <= framed.size(); ++n) {
    const std::uint64_t h = fnv1a64(std::string_view(framed).substr(n, 3));
    const auto bucket = static_cast<std::size_t>((h >> 1) % static_cast<std::uint64_t>(dim_));
    v[bucket] += (h & 1ULL) ? 1.0f : -1.0f;
  }
  if (std::all_of(v.begin(), v.end(), [](float x) { return x == 0.0f; })) {
    // Every trigram cancelled; fall back to one whole-text bucket.
    v[static_cast<std::size_t>(fnv1a64(framed) % static_cast<std::uint64_t>(dim_))] = 1.0f;
  }
  normalise(v);
  return {std::move(v), std::string(text)};
}

ExternalEmbedder::ExternalEmbedder(const std::vector<std::string>& texts, const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open embedding file " + file.string());
  std::string header;
  std::getline(in, header);
  std::istringstream hs(header);
  long d = 0;
  long n = 0;
  if (!(hs >> d >> n) || d < 1 || n < 0) fail(ErrorKind::format, "embedding file header must be 'D N'");
  if (static_cast<std::size_t>(n) != texts.size()) fail(ErrorKind::format, "embedding file has " + std::to_string(n) + " rows for " + std::to_string(texts.size()) + " texts");
  dim_ = static_cast<int>(d);
  for (long r = 0; r < n; ++r) {
    std::vector<float> row(static_cast<std::size_t>(d));
    in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(d * sizeof(float)));
    if (!in) fail(ErrorKind::integrity, "embedding file truncated at row " + std::to_string(r));
    double norm2 = 0.0;
    for (float x : row) {
      if (!std::isfinite(x)) fail(ErrorKind::data, "non-finite embedding value in row " + std::to_string(r));
      norm2 += static_cast<double>(x) * x;
    }
    if (norm2 == 0.0) fail(ErrorKind::data, "zero embedding in row " + std::to_string(r));
    normalise(row);
    rows_.emplace(texts[static_cast<std::size_t>(r)], std::move(row));
  }
}

TextEmbedding ExternalEmbedder::embed(std::string_view text) const {
  if (text.empty()) fail(ErrorKind::input, "cannot embed empty text");
  auto it = rows_.find(text);
  if (it == rows_.end()) fail(ErrorKind::input, "no external embedding for '" + std::string(text) + "'");
  return {it->second, std::string(text)};
}

void write_embedding_file(const std::vector<TextEmbedding>& rows, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot write " + file.string());
  const std::size_t d = rows.empty() ? 0 : rows.front().vector.size();
  out << d << ' ' << rows.size() << '\n';
  for (const auto& r : rows) {
    if (r.vector.size() != d) fail(ErrorKind::shape, "embedding rows differ in dimension");
    out.write(reinterpret_cast<const char*>(r.vector.data()), static_cast<std::streamsize>(d * sizeof(float)));
  }
}

std::unique_ptr<TextEmbedder> make_embedder(std::string_view provider, int dim, const std::vector<std::string>& texts,
                                            const std::filesystem::path& file) {
  if (provider == "hashing") return std::make_unique<HashingEmbedder>(dim);
  if (provider == "external") {
    auto e = std::make_unique<ExternalEmbedder>(texts, file);
    if (e->dim() != dim) fail(ErrorKind::config, "external embeddings have dimension " + std::to_string(e->dim()) + ", expected " + std::to_string(dim));
    return e;
  }
  fail(ErrorKind::config, "unknown text provider '" + std::string(provider) + "'");
}

std::vector<double> pairwise_dist(std::span<const TextEmbedding> embeddings) {
  const std::size_t n = embeddings.size();
  if (n < 2) fail(ErrorKind::shape, "pairwise distances need at least 2 embeddings");
  const std::size_t d = embeddings.front().vector.size();
  for (const auto& e : embeddings) {
    if (e.vector.size() != d) fail(ErrorKind::shape, "embedding dimensions differ");
  }
  std::vector<double> out(n * n, 0.0);
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a + 1; b < n; ++b) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = static_cast<double>(embeddings[a].vector[k]) - embeddings[b].vector[k];
        s += diff * diff;
      }
      out[a * n + b] = out[b * n + a] = std::sqrt(s);
    }
  }
  return out;
}

}  // namespace triad
