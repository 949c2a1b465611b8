#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "par/corpus.hpp"

namespace par::cloze {

struct InstanceMeta {
  std::string doc_id;
  std::size_t event_index = 0;
  std::size_t entity_id = 0;  // the removed entity
  corpus::Role target_role;
};

// One document-query pair. Positions index into doc_tokens; candidates are
// exactly the argument tokens, answers are the preceding mentions of the
// removed entity.
struct ClozeInstance {
  std::vector<corpus::EventToken> doc_tokens;
  std::vector<corpus::EventToken> query_tokens;  // exactly one TARGET token
  std::vector<std::size_t> candidate_positions;  // ascending
  std::vector<std::size_t> answer_positions;     // ascending, subset of candidates
  std::optional<std::vector<std::size_t>> supervision_positions;  // multi-arg only
  InstanceMeta meta;
};

// One instance per (event, argument) pair whose entity corefers with at
// least one argument of a preceding event. Output order: (event index,
// argument canonical order).
std::vector<ClozeInstance> generate_instances(const corpus::DocumentRecord& doc);

// Variant for events with >= 2 qualifying arguments: one instance per
// qualifying argument, the others replaced by MISSING placeholders.
// supervision_positions collects the preceding mentions of all removed
// entities.
std::vector<ClozeInstance> generate_multi_arg_instances(
    const corpus::DocumentRecord& doc);

// Keeps each event whose predicate count c exceeds `threshold` with
// probability sqrt(threshold / c); rarer events always survive.
std::vector<corpus::DocumentRecord> downsample_verbs(
    std::span<const corpus::DocumentRecord> docs, std::size_t threshold,
    std::uint64_t seed);

struct DatasetStats {
  std::size_t count = 0;
  std::optional<double> avg_candidates;
  std::optional<double> avg_answers;
};

DatasetStats dataset_stats(std::span<const ClozeInstance> instances);
std::string stats_json(const DatasetStats& stats);

// Checks all ClozeInstance invariants; throws ValidationError.
void validate_instance(const ClozeInstance& inst);

// ---------------------------------------------------------------------------
// Instance file: JSON lines, one instance per line.

std::string instance_to_json_line(const ClozeInstance& inst);
ClozeInstance instance_from_json_line(std::string_view line,
                                      std::size_t line_number,
                                      std::string_view source);

void write_instances(const std::filesystem::path& path,
                     std::span<const ClozeInstance> instances);
std::vector<ClozeInstance> read_instances(const std::filesystem::path& path);

}  // namespace par::cloze
