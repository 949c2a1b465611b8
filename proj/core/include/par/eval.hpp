#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "par/model.hpp"

namespace par::eval {

struct BucketStat {
  std::size_t n = 0;
  std::size_t correct = 0;
  double accuracy() const { return n ? static_cast<double>(correct) / n : 0.0; }
};

struct PerInstance {
  std::size_t pointer = 0;
  bool correct = false;
};

struct EvalReport {
  std::size_t n = 0;
  std::optional<double> accuracy;  // absent when n == 0
  // Accuracy bucketed by the number of preceding mentions of the removed
  // entity (|answer_positions|): "1", "2", ..., "<cap>+". Counts sum to n.
  std::vector<std::pair<std::string, BucketStat>> by_frequency;
  std::optional<std::vector<PerInstance>> per_instance;
};

struct EvalOptions {
  std::size_t workers = 1;
  std::size_t bucket_cap = 10;
  bool keep_per_instance = false;
};

// An instance counts as correct iff predict's pointer is an answer position.
EvalReport evaluate(const model::ParParams& params, const model::ParConfig& config,
                    const corpus::Vocabulary& vocab,
                    std::span<const cloze::ClozeInstance> instances,
                    const EvalOptions& options = {});

// Uniform choice among the candidates of each instance.
EvalReport baseline_random(std::span<const cloze::ClozeInstance> instances,
                           std::uint64_t seed, const EvalOptions& options = {});

// Picks from the largest candidate entity group (entity-less candidates are
// singletons). Ties go to the group with the most recent mention; within the
// group, the most recent mention is picked. Deterministic.
EvalReport baseline_most_freq(std::span<const cloze::ClozeInstance> instances,
                              const EvalOptions& options = {});

std::string report_json(const EvalReport& report);

// "bucket,n,accuracy" rows for plotting.
std::string breakdown_csv(const EvalReport& report);

// JSON lines with doc token surfaces, per-hop attention vectors, answers and
// the pointer, enough to render attention heatmaps externally.
void export_traces(const model::ParParams& params, const model::ParConfig& config,
                   const corpus::Vocabulary& vocab,
                   std::span<const cloze::ClozeInstance> instances,
                   const std::filesystem::path& path);

}  // namespace par::eval
