#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "par/errors.hpp"

namespace par::corpus {

// Syntactic slot of an argument: subj, dobj, or prep_<word>.
struct Role {
  enum class Kind { subj, dobj, prep };

  Kind kind = Kind::subj;
  std::string prep;  // non-empty iff kind == prep

  static Role subj() { return {Kind::subj, {}}; }
  static Role dobj() { return {Kind::dobj, {}}; }
  static Role prep_of(std::string word) { return {Kind::prep, std::move(word)}; }

  // Parses "subj" | "dobj" | "prep_<word>"; throws ValidationError otherwise.
  static Role parse(std::string_view text);

  std::string str() const;

  // Canonical ordering: subj < dobj < prep (preps keep surface order).
  int rank() const { return static_cast<int>(kind); }

  bool operator==(const Role&) const = default;
};

struct ArgumentMention {
  Role role;
  std::string lemma;  // lowercase, non-empty
  std::optional<std::size_t> entity_id;
  std::size_t mention_id = 0;  // unique within the document
};

struct EventRecord {
  // Normalized predicate; the particle is already folded in ("take_off").
  std::string predicate_lemma;
  bool negated = false;
  std::optional<std::string> particle;
  std::vector<ArgumentMention> args;  // canonical order, at most one per role
};

struct DocumentRecord {
  std::string doc_id;
  std::vector<EventRecord> events;
  std::size_t entity_count = 0;  // every entity_id in args is < entity_count
};

// Pre-normalization annotation tuple. Passive events tag their arguments
// with nsubjpass / agent, which normalize_event rewrites.
struct RawArgument {
  std::string role;
  std::string lemma;
  std::optional<std::size_t> entity_id;
  std::size_t mention_id = 0;
};

struct RawEvent {
  std::string predicate;
  bool passive = false;
  bool negated = false;
  std::optional<std::string> particle;
  std::vector<RawArgument> args;
};

// Applies the normalization rules: passive subject -> dobj, by-agent -> subj,
// particle folded into the predicate with "_", all lemmas lowercased, and
// arguments sorted into canonical order. Errors name the document and event.
EventRecord normalize_event(const RawEvent& raw, std::string_view doc_id,
                            std::size_t event_index);

enum class TokenKind { predicate, argument, placeholder_target, placeholder_missing };

std::string_view token_kind_str(TokenKind kind);
TokenKind parse_token_kind(std::string_view text);

struct EventToken {
  std::string surface;
  TokenKind kind = TokenKind::predicate;
  std::optional<Role> role;  // present for the three non-predicate kinds
  std::optional<std::size_t> entity_id;
  std::optional<std::size_t> mention_id;
};

// Predicate first ("not-" prefixed when negated), then one token per
// argument in canonical order with surface "<lemma>-<role>".
std::vector<EventToken> event_to_tokens(const EventRecord& event);

// "TARGET-<role>" / "MISSING-<role>" query tokens.
EventToken make_placeholder(TokenKind kind, const Role& role);
std::string placeholder_surface(TokenKind kind, const Role& role);

// Checks all DocumentRecord invariants; throws ValidationError.
void validate_document(const DocumentRecord& doc);

// ---------------------------------------------------------------------------
// Corpus file: UTF-8 JSON lines, one document per line.

std::string document_to_json_line(const DocumentRecord& doc);
DocumentRecord document_from_json_line(std::string_view line,
                                       std::size_t line_number,
                                       std::string_view source);

// Single-consumer stream over a corpus file; errors carry line numbers.
class CorpusReader {
 public:
  explicit CorpusReader(const std::filesystem::path& path);
  std::optional<DocumentRecord> next();

 private:
  std::ifstream in_;
  std::string path_;
  std::size_t line_ = 0;
};

std::vector<DocumentRecord> read_corpus(const std::filesystem::path& path);
void write_corpus(const std::filesystem::path& path,
                  std::span<const DocumentRecord> docs);

// ---------------------------------------------------------------------------
// Vocabulary: token surface -> dense index. Index 0 is the unknown token;
// placeholder surfaces for every role seen in the corpus get the fixed
// indices right after it.

class Vocabulary {
 public:
  static constexpr std::size_t kUnknown = 0;
  static constexpr std::string_view kUnknownSurface = "<unk>";

  // Frequencies are counted over event_to_tokens output; surfaces with
  // count >= min_count are kept, ordered by (count desc, surface asc).
  static Vocabulary build(std::span<const DocumentRecord> docs,
                          std::size_t min_count = 1);

  // Never fails; unseen surfaces map to kUnknown.
  std::size_t index_of(std::string_view surface) const;

  const std::string& surface(std::size_t index) const;
  bool is_placeholder(std::size_t index) const {
    return index >= 1 && index < 1 + placeholder_count_;
  }
  std::size_t size() const { return surfaces_.size(); }
  std::size_t placeholder_count() const { return placeholder_count_; }
  std::span<const std::string> surfaces() const { return surfaces_; }

  // FNV-1a over the ordered surface list; recorded in checkpoints.
  std::string hash_hex() const;

  static Vocabulary from_surfaces(std::vector<std::string> surfaces);

 private:
  struct StringHash {
    using is_transparent = void;
    std::size_t operator()(std::string_view s) const {
      return std::hash<std::string_view>{}(s);
    }
  };

  std::vector<std::string> surfaces_;
  std::size_t placeholder_count_ = 0;
  std::unordered_map<std::string, std::size_t, StringHash, std::equal_to<>> index_;
};

void save_vocabulary(const std::filesystem::path& path, const Vocabulary& vocab);
Vocabulary load_vocabulary(const std::filesystem::path& path);

std::uint64_t fnv1a64(std::string_view bytes,
                      std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string to_hex16(std::uint64_t value);

}  // namespace par::corpus
