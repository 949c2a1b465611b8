#include "par/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"
#include "par/parallel.hpp"
#include "par/rng.hpp"

namespace par::eval {

using cloze::ClozeInstance;
using nlohmann::ordered_json;

namespace {

std::string bucket_label(std::size_t answers, std::size_t cap) {
  if (answers >= cap) return std::to_string(cap) + "+";
  return std::to_string(answers);
}

EvalReport assemble_report(std::span<const ClozeInstance> instances,
                           const std::vector<PerInstance>& outcomes,
                           const EvalOptions& options) {
  EvalReport report;
  report.n = instances.size();
  if (report.n == 0) return report;

  std::size_t correct = 0;
  std::map<std::size_t, BucketStat> buckets;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const std::size_t answers = instances[i].answer_positions.size();
    const std::size_t bucket = std::min(answers, options.bucket_cap);
    BucketStat& stat = buckets[bucket];
    ++stat.n;
    if (outcomes[i].correct) {
      ++stat.correct;
      ++correct;
    }
  }
  report.accuracy = static_cast<double>(correct) / static_cast<double>(report.n);
  for (const auto& [bucket, stat] : buckets) {
    report.by_frequency.emplace_back(bucket_label(bucket, options.bucket_cap), stat);
  }
  if (options.keep_per_instance) report.per_instance = outcomes;
  return report;
}

}  // namespace

EvalReport evaluate(const model::ParParams& params, const model::ParConfig& config,
                    const corpus::Vocabulary& vocab,
                    std::span<const ClozeInstance> instances,
                    const EvalOptions& options) {
  std::vector<PerInstance> outcomes(instances.size());
  parallel_for(instances.size(), options.workers, [&](std::size_t i) {
    const model::Prediction pred = model::predict(params, config, vocab,
                                                  instances[i]);
    outcomes[i] = PerInstance{pred.pointer, pred.correct};
  });
  return assemble_report(instances, outcomes, options);
}

EvalReport baseline_random(std::span<const ClozeInstance> instances,
                           std::uint64_t seed, const EvalOptions& options) {
  Rng rng(seed);
  std::vector<PerInstance> outcomes(instances.size());
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const ClozeInstance& inst = instances[i];
    const std::size_t pick =
        inst.candidate_positions[rng.next_below(inst.candidate_positions.size())];
    outcomes[i].pointer = pick;
    outcomes[i].correct = std::binary_search(inst.answer_positions.begin(),
                                             inst.answer_positions.end(), pick);
  }
  return assemble_report(instances, outcomes, options);
}

EvalReport baseline_most_freq(std::span<const ClozeInstance> instances,
                              const EvalOptions& options) {
  std::vector<PerInstance> outcomes(instances.size());
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const ClozeInstance& inst = instances[i];
    // Group candidates by entity; entity-less candidates stand alone.
    struct Group {
      std::size_t size = 0;
      std::size_t latest = 0;
    };
    std::map<std::size_t, Group> chains;
    std::vector<Group> singletons;
    for (std::size_t pos : inst.candidate_positions) {
      const auto& token = inst.doc_tokens[pos];
      if (token.entity_id) {
        Group& g = chains[*token.entity_id];
        ++g.size;
        g.latest = pos;  // candidates are ascending
      } else {
        singletons.push_back(Group{1, pos});
      }
    }
    // Largest group wins; ties go to the most recent mention.
    Group best{0, 0};
    std::optional<std::size_t> best_entity;
    auto consider = [&](const Group& g, std::optional<std::size_t> entity) {
      if (g.size > best.size || (g.size == best.size && g.latest > best.latest)) {
        best = g;
        best_entity = entity;
      }
    };
    for (const auto& [entity, group] : chains) consider(group, entity);
    for (const Group& group : singletons) consider(group, std::nullopt);

    outcomes[i].pointer = best.latest;
    outcomes[i].correct = best_entity && *best_entity == inst.meta.entity_id;
  }
  return assemble_report(instances, outcomes, options);
}

std::string report_json(const EvalReport& report) {
  ordered_json j;
  j["n"] = report.n;
  if (report.accuracy) {
    j["accuracy"] = *report.accuracy;
  } else {
    j["accuracy"] = nullptr;
  }
  ordered_json buckets = ordered_json::object();
  for (const auto& [label, stat] : report.by_frequency) {
    ordered_json b;
    b["n"] = stat.n;
    b["correct"] = stat.correct;
    b["accuracy"] = stat.accuracy();
    buckets[label] = std::move(b);
  }
  j["by_frequency"] = std::move(buckets);
  return j.dump();
}

std::string breakdown_csv(const EvalReport& report) {
  std::ostringstream os;
  os << "bucket,n,accuracy\n";
  for (const auto& [label, stat] : report.by_frequency) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", stat.accuracy());
    os << label << "," << stat.n << "," << buf << "\n";
  }
  return os.str();
}

void export_traces(const model::ParParams& params, const model::ParConfig& config,
                   const corpus::Vocabulary& vocab,
                   std::span<const ClozeInstance> instances,
                   const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write trace file '" + path.string() + "'");
  for (const ClozeInstance& inst : instances) {
    const model::Prediction pred = model::predict(params, config, vocab, inst);
    ordered_json j;
    ordered_json doc = ordered_json::array();
    for (const auto& token : inst.doc_tokens) doc.push_back(token.surface);
    ordered_json query = ordered_json::array();
    for (const auto& token : inst.query_tokens) query.push_back(token.surface);
    j["doc"] = std::move(doc);
    j["query"] = std::move(query);
    ordered_json hops = ordered_json::array();
    for (const auto& hop : pred.trace.hops) hops.push_back(hop.probs);
    j["hops"] = std::move(hops);
    j["answers"] = inst.answer_positions;
    j["pointer"] = pred.pointer;
    j["correct"] = pred.correct;
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace par::eval
