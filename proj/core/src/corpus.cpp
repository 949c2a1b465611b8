#include "par/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <set>
#include <sstream>
#include <unordered_set>

#include "json.hpp"

namespace par::corpus {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string lower_ascii(std::string_view s) {
  std::string out(s);
  for (char& c : out) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return out;
}

bool has_upper_ascii(std::string_view s) {
  return std::any_of(s.begin(), s.end(),
                     [](char c) { return c >= 'A' && c <= 'Z'; });
}

[[noreturn]] void fail_at(std::string_view source, std::size_t line,
                          const std::string& message, bool parse) {
  std::ostringstream os;
  os << source << ":" << line << ": " << message;
  if (parse) throw ParseError(os.str());
  throw ValidationError(os.str());
}

}  // namespace

Role Role::parse(std::string_view text) {
  if (text == "subj") return Role::subj();
  if (text == "dobj") return Role::dobj();
  if (text.starts_with("prep_")) {
    std::string_view word = text.substr(5);
    if (!word.empty() && !has_upper_ascii(word)) {
      return Role::prep_of(std::string(word));
    }
  }
  throw ValidationError("invalid role '" + std::string(text) +
                        "' (expected subj, dobj or prep_<word>)");
}

std::string Role::str() const {
  switch (kind) {
    case Kind::subj: return "subj";
    case Kind::dobj: return "dobj";
    case Kind::prep: return "prep_" + prep;
  }
  return {};
}

std::string_view token_kind_str(TokenKind kind) {
  switch (kind) {
    case TokenKind::predicate: return "pred";
    case TokenKind::argument: return "arg";
    case TokenKind::placeholder_target: return "target";
    case TokenKind::placeholder_missing: return "missing";
  }
  return {};
}

TokenKind parse_token_kind(std::string_view text) {
  if (text == "pred") return TokenKind::predicate;
  if (text == "arg") return TokenKind::argument;
  if (text == "target") return TokenKind::placeholder_target;
  if (text == "missing") return TokenKind::placeholder_missing;
  throw ValidationError("invalid token kind '" + std::string(text) + "'");
}

EventRecord normalize_event(const RawEvent& raw, std::string_view doc_id,
                            std::size_t event_index) {
  auto where = [&] {
    std::ostringstream os;
    os << "doc '" << doc_id << "' event " << event_index;
    return os.str();
  };
  if (raw.predicate.empty()) {
    throw ValidationError(where() + ": missing predicate lemma");
  }

  EventRecord event;
  event.negated = raw.negated;
  event.predicate_lemma = lower_ascii(raw.predicate);
  if (raw.particle && !raw.particle->empty()) {
    event.particle = lower_ascii(*raw.particle);
    event.predicate_lemma += "_" + *event.particle;
  }

  for (const RawArgument& arg : raw.args) {
    if (arg.lemma.empty()) {
      throw ValidationError(where() + ": empty argument lemma");
    }
    const std::string raw_role = lower_ascii(arg.role);
    Role role;
    if (raw.passive) {
      if (raw_role == "nsubjpass" || raw_role == "subjpass") {
        role = Role::dobj();
      } else if (raw_role == "agent") {
        role = Role::subj();
      } else if (raw_role == "dobj" || raw_role == "obj") {
        role = Role::dobj();
      } else if (raw_role.starts_with("prep_")) {
        role = Role::parse(raw_role);
      } else {
        throw ValidationError(where() + ": unexpected role '" + raw_role +
                              "' in passive event");
      }
    } else {
      if (raw_role == "subj" || raw_role == "nsubj") {
        role = Role::subj();
      } else if (raw_role == "dobj" || raw_role == "obj") {
        role = Role::dobj();
      } else if (raw_role.starts_with("prep_")) {
        role = Role::parse(raw_role);
      } else {
        throw ValidationError(where() + ": unexpected role '" + raw_role +
                              "' in active event");
      }
    }
    event.args.push_back(ArgumentMention{role, lower_ascii(arg.lemma),
                                         arg.entity_id, arg.mention_id});
  }

  std::stable_sort(event.args.begin(), event.args.end(),
                   [](const ArgumentMention& a, const ArgumentMention& b) {
                     return a.role.rank() < b.role.rank();
                   });
  for (std::size_t i = 1; i < event.args.size(); ++i) {
    if (event.args[i].role == event.args[i - 1].role) {
      throw ValidationError(where() + ": duplicate role '" +
                            event.args[i].role.str() + "'");
    }
  }
  return event;
}

std::string placeholder_surface(TokenKind kind, const Role& role) {
  if (kind == TokenKind::placeholder_target) return "TARGET-" + role.str();
  if (kind == TokenKind::placeholder_missing) return "MISSING-" + role.str();
  throw ContractViolation("placeholder_surface: not a placeholder kind");
}

EventToken make_placeholder(TokenKind kind, const Role& role) {
  EventToken token;
  token.surface = placeholder_surface(kind, role);
  token.kind = kind;
  token.role = role;
  return token;
}

std::vector<EventToken> event_to_tokens(const EventRecord& event) {
  std::vector<EventToken> tokens;
  tokens.reserve(1 + event.args.size());
  EventToken pred;
  pred.surface = event.negated ? "not-" + event.predicate_lemma
                               : event.predicate_lemma;
  pred.kind = TokenKind::predicate;
  tokens.push_back(std::move(pred));
  for (const ArgumentMention& arg : event.args) {
    EventToken tok;
    tok.surface = arg.lemma + "-" + arg.role.str();
    tok.kind = TokenKind::argument;
    tok.role = arg.role;
    tok.entity_id = arg.entity_id;
    tok.mention_id = arg.mention_id;
    tokens.push_back(std::move(tok));
  }
  return tokens;
}

void validate_document(const DocumentRecord& doc) {
  if (doc.doc_id.empty()) throw ValidationError("empty doc_id");
  std::unordered_set<std::size_t> mention_ids;
  for (std::size_t e = 0; e < doc.events.size(); ++e) {
    const EventRecord& event = doc.events[e];
    auto where = [&] {
      std::ostringstream os;
      os << "doc '" << doc.doc_id << "' event " << e;
      return os.str();
    };
    if (event.predicate_lemma.empty()) {
      throw ValidationError(where() + ": empty predicate lemma");
    }
    if (has_upper_ascii(event.predicate_lemma)) {
      throw ValidationError(where() + ": predicate lemma not lowercase");
    }
    int last_rank = -1;
    for (std::size_t a = 0; a < event.args.size(); ++a) {
      const ArgumentMention& arg = event.args[a];
      if (arg.lemma.empty()) {
        throw ValidationError(where() + ": empty argument lemma");
      }
      if (has_upper_ascii(arg.lemma)) {
        throw ValidationError(where() + ": argument lemma not lowercase");
      }
      if (arg.role.rank() < last_rank) {
        throw ValidationError(where() + ": arguments not in canonical order");
      }
      last_rank = arg.role.rank();
      for (std::size_t b = 0; b < a; ++b) {
        if (event.args[b].role == arg.role) {
          throw ValidationError(where() + ": duplicate role '" +
                                arg.role.str() + "'");
        }
      }
      if (arg.entity_id && *arg.entity_id >= doc.entity_count) {
        std::ostringstream os;
        os << where() << ": entity_id " << *arg.entity_id
           << " out of range (entity_count " << doc.entity_count << ")";
        throw ValidationError(os.str());
      }
      if (!mention_ids.insert(arg.mention_id).second) {
        std::ostringstream os;
        os << where() << ": duplicate mention_id " << arg.mention_id;
        throw ValidationError(os.str());
      }
    }
  }
}

// ---------------------------------------------------------------------------
// JSON lines I/O.

namespace {

void expect_keys(const json& obj, std::initializer_list<const char*> keys,
                 std::string_view source, std::size_t line) {
  for (const auto& [key, value] : obj.items()) {
    if (std::find_if(keys.begin(), keys.end(), [&](const char* k) {
          return key == k;
        }) == keys.end()) {
      fail_at(source, line, "unexpected key '" + key + "'", true);
    }
  }
}

const json& require(const json& obj, const char* key, std::string_view source,
                    std::size_t line) {
  auto it = obj.find(key);
  if (it == obj.end()) {
    fail_at(source, line, std::string("missing key '") + key + "'", true);
  }
  return *it;
}

std::size_t get_unsigned(const json& value, const char* key,
                         std::string_view source, std::size_t line) {
  if (!value.is_number_unsigned()) {
    fail_at(source, line,
            std::string("'") + key + "' must be a non-negative integer", true);
  }
  return value.get<std::size_t>();
}

}  // namespace

std::string document_to_json_line(const DocumentRecord& doc) {
  ordered_json j;
  j["doc_id"] = doc.doc_id;
  j["entity_count"] = doc.entity_count;
  ordered_json events = ordered_json::array();
  for (const EventRecord& event : doc.events) {
    ordered_json je;
    je["pred"] = event.predicate_lemma;
    je["neg"] = event.negated;
    if (event.particle) {
      je["particle"] = *event.particle;
    } else {
      je["particle"] = nullptr;
    }
    ordered_json args = ordered_json::array();
    for (const ArgumentMention& arg : event.args) {
      ordered_json ja;
      ja["role"] = arg.role.str();
      ja["lemma"] = arg.lemma;
      if (arg.entity_id) {
        ja["entity_id"] = *arg.entity_id;
      } else {
        ja["entity_id"] = nullptr;
      }
      ja["mention_id"] = arg.mention_id;
      args.push_back(std::move(ja));
    }
    je["args"] = std::move(args);
    events.push_back(std::move(je));
  }
  j["events"] = std::move(events);
  return j.dump();
}

DocumentRecord document_from_json_line(std::string_view line,
                                       std::size_t line_number,
                                       std::string_view source) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    fail_at(source, line_number, std::string("invalid JSON: ") + e.what(), true);
  }
  if (!j.is_object()) fail_at(source, line_number, "expected an object", true);
  expect_keys(j, {"doc_id", "entity_count", "events"}, source, line_number);

  DocumentRecord doc;
  try {
    doc.doc_id = require(j, "doc_id", source, line_number).get<std::string>();
    doc.entity_count = get_unsigned(require(j, "entity_count", source, line_number),
                                    "entity_count", source, line_number);
    const json& events = require(j, "events", source, line_number);
    if (!events.is_array()) {
      fail_at(source, line_number, "'events' must be an array", true);
    }
    for (const json& je : events) {
      expect_keys(je, {"pred", "neg", "particle", "args"}, source, line_number);
      EventRecord event;
      event.predicate_lemma =
          require(je, "pred", source, line_number).get<std::string>();
      event.negated = require(je, "neg", source, line_number).get<bool>();
      const json& particle = require(je, "particle", source, line_number);
      if (!particle.is_null()) event.particle = particle.get<std::string>();
      const json& args = require(je, "args", source, line_number);
      if (!args.is_array()) {
        fail_at(source, line_number, "'args' must be an array", true);
      }
      for (const json& ja : args) {
        expect_keys(ja, {"role", "lemma", "entity_id", "mention_id"}, source,
                    line_number);
        ArgumentMention arg;
        arg.role = Role::parse(
            require(ja, "role", source, line_number).get<std::string>());
        arg.lemma = require(ja, "lemma", source, line_number).get<std::string>();
        const json& entity = require(ja, "entity_id", source, line_number);
        if (!entity.is_null()) {
          arg.entity_id = get_unsigned(entity, "entity_id", source, line_number);
        }
        arg.mention_id = get_unsigned(require(ja, "mention_id", source, line_number),
                                      "mention_id", source, line_number);
        event.args.push_back(std::move(arg));
      }
      doc.events.push_back(std::move(event));
    }
  } catch (const json::exception& e) {
    fail_at(source, line_number, std::string("schema violation: ") + e.what(),
            true);
  } catch (const ValidationError& e) {
    fail_at(source, line_number, e.what(), false);
  }

  try {
    validate_document(doc);
  } catch (const ValidationError& e) {
    fail_at(source, line_number, e.what(), false);
  }
  return doc;
}

CorpusReader::CorpusReader(const std::filesystem::path& path)
    : in_(path), path_(path.string()) {
  if (!in_) throw IoError("cannot open corpus file '" + path_ + "'");
}

std::optional<DocumentRecord> CorpusReader::next() {
  std::string line;
  while (std::getline(in_, line)) {
    ++line_;
    if (line.empty()) continue;
    return document_from_json_line(line, line_, path_);
  }
  return std::nullopt;
}

std::vector<DocumentRecord> read_corpus(const std::filesystem::path& path) {
  CorpusReader reader(path);
  std::vector<DocumentRecord> docs;
  while (auto doc = reader.next()) docs.push_back(std::move(*doc));
  return docs;
}

void write_corpus(const std::filesystem::path& path,
                  std::span<const DocumentRecord> docs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write corpus file '" + path.string() + "'");
  for (const DocumentRecord& doc : docs) {
    out << document_to_json_line(doc) << '\n';
  }
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// Vocabulary.

Vocabulary Vocabulary::build(std::span<const DocumentRecord> docs,
                             std::size_t min_count) {
  if (min_count < 1) throw ContractViolation("build: min_count must be >= 1");

  std::unordered_map<std::string, std::size_t> counts;
  std::set<std::string> role_strings;
  for (const DocumentRecord& doc : docs) {
    for (const EventRecord& event : doc.events) {
      for (const EventToken& token : event_to_tokens(event)) {
        ++counts[token.surface];
        if (token.role) role_strings.insert(token.role->str());
      }
    }
  }

  std::vector<std::string> surfaces;
  surfaces.emplace_back(kUnknownSurface);

  std::vector<std::string> placeholders;
  for (const std::string& role : role_strings) {
    placeholders.push_back("TARGET-" + role);
    placeholders.push_back("MISSING-" + role);
  }
  std::sort(placeholders.begin(), placeholders.end());
  for (std::string& p : placeholders) surfaces.push_back(std::move(p));

  std::vector<std::pair<std::string, std::size_t>> kept;
  kept.reserve(counts.size());
  for (const auto& [surface, count] : counts) {
    if (count >= min_count) kept.emplace_back(surface, count);
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  for (auto& [surface, count] : kept) surfaces.push_back(std::move(surface));

  Vocabulary vocab = from_surfaces(std::move(surfaces));
  return vocab;
}

Vocabulary Vocabulary::from_surfaces(std::vector<std::string> surfaces) {
  if (surfaces.empty() || surfaces.front() != kUnknownSurface) {
    throw ValidationError("vocabulary must start with the unknown token");
  }
  Vocabulary vocab;
  vocab.surfaces_ = std::move(surfaces);
  std::size_t placeholders = 0;
  for (std::size_t i = 1; i < vocab.surfaces_.size(); ++i) {
    const std::string& s = vocab.surfaces_[i];
    if (s.starts_with("TARGET-") || s.starts_with("MISSING-")) {
      if (i == placeholders + 1) ++placeholders;
    }
  }
  vocab.placeholder_count_ = placeholders;
  for (std::size_t i = 0; i < vocab.surfaces_.size(); ++i) {
    if (!vocab.index_.emplace(vocab.surfaces_[i], i).second) {
      throw ValidationError("duplicate vocabulary surface '" +
                            vocab.surfaces_[i] + "'");
    }
  }
  return vocab;
}

std::size_t Vocabulary::index_of(std::string_view surface) const {
  auto it = index_.find(surface);
  return it == index_.end() ? kUnknown : it->second;
}

const std::string& Vocabulary::surface(std::size_t index) const {
  if (index >= surfaces_.size()) {
    throw ContractViolation("vocabulary index out of range");
  }
  return surfaces_[index];
}

std::string Vocabulary::hash_hex() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const std::string& s : surfaces_) {
    h = fnv1a64(s, h);
    h = fnv1a64("\n", h);
  }
  return to_hex16(h);
}

void save_vocabulary(const std::filesystem::path& path, const Vocabulary& vocab) {
  ordered_json j;
  j["surfaces"] = vocab.surfaces();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write vocabulary file '" + path.string() + "'");
  out << j.dump() << '\n';
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

Vocabulary load_vocabulary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open vocabulary file '" + path.string() + "'");
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ParseError("invalid vocabulary file '" + path.string() + "': " +
                     e.what());
  }
  if (!j.is_object() || !j.contains("surfaces") || !j["surfaces"].is_array()) {
    throw ParseError("invalid vocabulary file '" + path.string() +
                     "': expected {\"surfaces\": [...]}");
  }
  return Vocabulary::from_surfaces(j["surfaces"].get<std::vector<std::string>>());
}

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string to_hex16(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(value));
  return std::string(buf);
}

}  // namespace par::corpus
