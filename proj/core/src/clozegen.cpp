#include "par/clozegen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"
#include "par/rng.hpp"

namespace par::cloze {

using corpus::ArgumentMention;
using corpus::DocumentRecord;
using corpus::EventRecord;
using corpus::EventToken;
using corpus::Role;
using corpus::TokenKind;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// Incremental view of the tokens of all events preceding the current one.
struct PrecedingState {
  std::vector<EventToken> tokens;
  std::vector<std::size_t> argument_positions;
  std::unordered_map<std::size_t, std::vector<std::size_t>> entity_positions;

  void append_event(const std::vector<EventToken>& event_tokens) {
    for (const EventToken& token : event_tokens) {
      if (token.kind == TokenKind::argument) {
        argument_positions.push_back(tokens.size());
        if (token.entity_id) {
          entity_positions[*token.entity_id].push_back(tokens.size());
        }
      }
      tokens.push_back(token);
    }
  }

  const std::vector<std::size_t>* mentions_of(std::size_t entity) const {
    auto it = entity_positions.find(entity);
    if (it == entity_positions.end() || it->second.empty()) return nullptr;
    return &it->second;
  }
};

// Indices (into event.args) of arguments that corefer with at least one
// preceding argument mention.
std::vector<std::size_t> qualifying_args(const EventRecord& event,
                                         const PrecedingState& state) {
  std::vector<std::size_t> out;
  for (std::size_t a = 0; a < event.args.size(); ++a) {
    const ArgumentMention& arg = event.args[a];
    if (arg.entity_id && state.mentions_of(*arg.entity_id)) out.push_back(a);
  }
  return out;
}

}  // namespace

std::vector<ClozeInstance> generate_instances(const DocumentRecord& doc) {
  std::vector<ClozeInstance> out;
  PrecedingState state;
  for (std::size_t e = 0; e < doc.events.size(); ++e) {
    const EventRecord& event = doc.events[e];
    const std::vector<EventToken> event_tokens = corpus::event_to_tokens(event);
    for (std::size_t a : qualifying_args(event, state)) {
      const ArgumentMention& arg = event.args[a];
      ClozeInstance inst;
      inst.doc_tokens = state.tokens;
      inst.candidate_positions = state.argument_positions;
      inst.answer_positions = *state.mentions_of(*arg.entity_id);
      inst.query_tokens = event_tokens;
      inst.query_tokens[a + 1] =
          corpus::make_placeholder(TokenKind::placeholder_target, arg.role);
      inst.meta = InstanceMeta{doc.doc_id, e, *arg.entity_id, arg.role};
      out.push_back(std::move(inst));
    }
    state.append_event(event_tokens);
  }
  return out;
}

std::vector<ClozeInstance> generate_multi_arg_instances(const DocumentRecord& doc) {
  std::vector<ClozeInstance> out;
  PrecedingState state;
  for (std::size_t e = 0; e < doc.events.size(); ++e) {
    const EventRecord& event = doc.events[e];
    const std::vector<EventToken> event_tokens = corpus::event_to_tokens(event);
    const std::vector<std::size_t> qualifying = qualifying_args(event, state);
    if (qualifying.size() >= 2) {
      // Preceding mentions of every removed entity, deduplicated.
      std::vector<std::size_t> supervision;
      {
        std::unordered_set<std::size_t> seen;
        for (std::size_t a : qualifying) {
          for (std::size_t pos :
               *state.mentions_of(*event.args[a].entity_id)) {
            if (seen.insert(pos).second) supervision.push_back(pos);
          }
        }
        std::sort(supervision.begin(), supervision.end());
      }
      for (std::size_t target : qualifying) {
        const ArgumentMention& arg = event.args[target];
        ClozeInstance inst;
        inst.doc_tokens = state.tokens;
        inst.candidate_positions = state.argument_positions;
        inst.answer_positions = *state.mentions_of(*arg.entity_id);
        inst.query_tokens = event_tokens;
        for (std::size_t a : qualifying) {
          inst.query_tokens[a + 1] = corpus::make_placeholder(
              a == target ? TokenKind::placeholder_target
                          : TokenKind::placeholder_missing,
              event.args[a].role);
        }
        inst.supervision_positions = supervision;
        inst.meta = InstanceMeta{doc.doc_id, e, *arg.entity_id, arg.role};
        out.push_back(std::move(inst));
      }
    }
    state.append_event(event_tokens);
  }
  return out;
}

std::vector<DocumentRecord> downsample_verbs(
    std::span<const DocumentRecord> docs, std::size_t threshold,
    std::uint64_t seed) {
  if (threshold == 0) throw ContractViolation("downsample_verbs: threshold must be > 0");

  std::unordered_map<std::string, std::size_t> counts;
  for (const DocumentRecord& doc : docs) {
    for (const EventRecord& event : doc.events) ++counts[event.predicate_lemma];
  }

  Rng rng(seed);
  std::vector<DocumentRecord> out;
  out.reserve(docs.size());
  for (const DocumentRecord& doc : docs) {
    DocumentRecord kept;
    kept.doc_id = doc.doc_id;
    kept.entity_count = doc.entity_count;
    for (const EventRecord& event : doc.events) {
      const std::size_t c = counts[event.predicate_lemma];
      if (c > threshold) {
        const double keep_p = std::sqrt(static_cast<double>(threshold) /
                                        static_cast<double>(c));
        if (rng.next_double() >= keep_p) continue;
      }
      kept.events.push_back(event);
    }
    out.push_back(std::move(kept));
  }
  return out;
}

DatasetStats dataset_stats(std::span<const ClozeInstance> instances) {
  DatasetStats stats;
  stats.count = instances.size();
  if (instances.empty()) return stats;
  double candidates = 0;
  double answers = 0;
  for (const ClozeInstance& inst : instances) {
    candidates += static_cast<double>(inst.candidate_positions.size());
    answers += static_cast<double>(inst.answer_positions.size());
  }
  stats.avg_candidates = candidates / static_cast<double>(stats.count);
  stats.avg_answers = answers / static_cast<double>(stats.count);
  return stats;
}

std::string stats_json(const DatasetStats& stats) {
  ordered_json j;
  j["count"] = stats.count;
  if (stats.avg_candidates) {
    j["avg_candidates"] = *stats.avg_candidates;
  } else {
    j["avg_candidates"] = nullptr;
  }
  if (stats.avg_answers) {
    j["avg_answers"] = *stats.avg_answers;
  } else {
    j["avg_answers"] = nullptr;
  }
  return j.dump();
}

void validate_instance(const ClozeInstance& inst) {
  std::vector<std::size_t> argument_positions;
  for (std::size_t i = 0; i < inst.doc_tokens.size(); ++i) {
    if (inst.doc_tokens[i].kind == TokenKind::argument) {
      argument_positions.push_back(i);
    }
  }
  if (inst.candidate_positions != argument_positions) {
    throw ValidationError(
        "candidate_positions must be exactly the argument token positions");
  }
  if (inst.answer_positions.empty()) {
    throw ValidationError("answer_positions must be non-empty");
  }
  if (!std::is_sorted(inst.answer_positions.begin(), inst.answer_positions.end())) {
    throw ValidationError("answer_positions must be ascending");
  }
  for (std::size_t pos : inst.answer_positions) {
    if (!std::binary_search(inst.candidate_positions.begin(),
                            inst.candidate_positions.end(), pos)) {
      throw ValidationError("answer position outside the candidate set");
    }
    const EventToken& token = inst.doc_tokens[pos];
    if (!token.entity_id || *token.entity_id != inst.meta.entity_id) {
      throw ValidationError(
          "answer token entity does not match the removed entity");
    }
  }
  std::size_t targets = 0;
  for (const EventToken& token : inst.query_tokens) {
    if (token.kind == TokenKind::placeholder_target) ++targets;
  }
  if (targets != 1) {
    throw ValidationError("query must contain exactly one TARGET placeholder");
  }
  if (inst.supervision_positions) {
    for (std::size_t pos : *inst.supervision_positions) {
      if (!std::binary_search(inst.candidate_positions.begin(),
                              inst.candidate_positions.end(), pos)) {
        throw ValidationError("supervision position outside the candidate set");
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Instance file I/O.

namespace {

ordered_json token_to_json(const EventToken& token) {
  ordered_json j;
  j["s"] = token.surface;
  j["k"] = corpus::token_kind_str(token.kind);
  if (token.entity_id) {
    j["e"] = *token.entity_id;
  } else {
    j["e"] = nullptr;
  }
  return j;
}

EventToken token_from_json(const json& j, std::size_t line_number,
                           std::string_view source) {
  auto fail = [&](const std::string& message) -> void {
    std::ostringstream os;
    os << source << ":" << line_number << ": " << message;
    throw ParseError(os.str());
  };
  if (!j.is_object() || !j.contains("s") || !j.contains("k") || !j.contains("e")) {
    fail("token must be {\"s\", \"k\", \"e\"}");
  }
  EventToken token;
  try {
    token.surface = j.at("s").get<std::string>();
    token.kind = corpus::parse_token_kind(j.at("k").get<std::string>());
    if (!j.at("e").is_null()) token.entity_id = j.at("e").get<std::size_t>();
  } catch (const json::exception& e) {
    fail(std::string("bad token: ") + e.what());
  } catch (const ValidationError& e) {
    fail(e.what());
  }
  // Placeholder roles are recoverable from the surface.
  if (token.kind == TokenKind::placeholder_target ||
      token.kind == TokenKind::placeholder_missing) {
    const std::string& s = token.surface;
    const std::size_t dash = s.find('-');
    if (dash != std::string::npos) {
      try {
        token.role = Role::parse(s.substr(dash + 1));
      } catch (const ValidationError&) {
        fail("placeholder surface '" + s + "' has no parsable role");
      }
    }
  }
  return token;
}

}  // namespace

std::string instance_to_json_line(const ClozeInstance& inst) {
  ordered_json j;
  ordered_json doc = ordered_json::array();
  for (const EventToken& token : inst.doc_tokens) doc.push_back(token_to_json(token));
  ordered_json query = ordered_json::array();
  for (const EventToken& token : inst.query_tokens) query.push_back(token_to_json(token));
  j["doc"] = std::move(doc);
  j["query"] = std::move(query);
  j["answers"] = inst.answer_positions;
  j["candidates"] = inst.candidate_positions;
  if (inst.supervision_positions) {
    j["supervision"] = *inst.supervision_positions;
  } else {
    j["supervision"] = nullptr;
  }
  ordered_json meta;
  meta["doc_id"] = inst.meta.doc_id;
  meta["event"] = inst.meta.event_index;
  meta["entity"] = inst.meta.entity_id;
  meta["role"] = inst.meta.target_role.str();
  j["meta"] = std::move(meta);
  return j.dump();
}

ClozeInstance instance_from_json_line(std::string_view line,
                                      std::size_t line_number,
                                      std::string_view source) {
  auto fail = [&](const std::string& message, bool parse) -> void {
    std::ostringstream os;
    os << source << ":" << line_number << ": " << message;
    if (parse) throw ParseError(os.str());
    throw ValidationError(os.str());
  };

  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    fail(std::string("invalid JSON: ") + e.what(), true);
  }
  if (!j.is_object()) fail("expected an object", true);
  for (const char* key : {"doc", "query", "answers", "candidates", "supervision", "meta"}) {
    if (!j.contains(key)) fail(std::string("missing key '") + key + "'", true);
  }

  ClozeInstance inst;
  try {
    for (const json& tok : j.at("doc")) {
      inst.doc_tokens.push_back(token_from_json(tok, line_number, source));
    }
    for (const json& tok : j.at("query")) {
      inst.query_tokens.push_back(token_from_json(tok, line_number, source));
    }
    inst.answer_positions = j.at("answers").get<std::vector<std::size_t>>();
    inst.candidate_positions = j.at("candidates").get<std::vector<std::size_t>>();
    if (!j.at("supervision").is_null()) {
      inst.supervision_positions =
          j.at("supervision").get<std::vector<std::size_t>>();
    }
    const json& meta = j.at("meta");
    inst.meta.doc_id = meta.at("doc_id").get<std::string>();
    inst.meta.event_index = meta.at("event").get<std::size_t>();
    inst.meta.entity_id = meta.at("entity").get<std::size_t>();
    inst.meta.target_role = Role::parse(meta.at("role").get<std::string>());
  } catch (const json::exception& e) {
    fail(std::string("schema violation: ") + e.what(), true);
  } catch (const ValidationError& e) {
    fail(e.what(), false);
  }

  try {
    validate_instance(inst);
  } catch (const ValidationError& e) {
    fail(e.what(), false);
  }
  return inst;
}

void write_instances(const std::filesystem::path& path,
                     std::span<const ClozeInstance> instances) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write instance file '" + path.string() + "'");
  for (const ClozeInstance& inst : instances) {
    out << instance_to_json_line(inst) << '\n';
  }
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

std::vector<ClozeInstance> read_instances(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open instance file '" + path.string() + "'");
  std::vector<ClozeInstance> out;
  std::string line;
  std::size_t line_number = 0;
  const std::string source = path.string();
  while (std::getline(in, line)) {
    ++line_number;
    if (line.empty()) continue;
    out.push_back(instance_from_json_line(line, line_number, source));
  }
  return out;
}

}  // namespace par::cloze
