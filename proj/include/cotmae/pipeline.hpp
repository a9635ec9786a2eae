#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "cotmae/config.hpp"

namespace cotmae {

using MetricList = std::vector<std::pair<std::string, double>>;

struct PipelineResult {
  std::filesystem::path pretrain_checkpoint;
  std::filesystem::path stage1_checkpoint;
  std::filesystem::path stage2_checkpoint;
  LossBreakdown pretrain_first;
  LossBreakdown pretrain_last;
  MetricList stage1;
  MetricList stage2;
};

/// Vocabulary from tokenizer.vocab when set, otherwise trained on the corpus.
Vocabulary resolve_vocab(const RunConfig& cfg, const std::vector<Document>& docs);

/// Toy end-to-end run under paths.out:
///   pretrain/ -> stage1/ (BM25 negatives) -> stage2/ (BM25 + mined) -> eval.
/// Each stage writes its own metrics.csv and checkpoints/; the evaluation of
/// both stages goes to results.json and the TREC run files.
PipelineResult run_pipeline(const RunConfig& cfg, std::ostream* log = nullptr);

/// Built-in ablation grids: "mask-rate", "decoder-layers", "sampling".
std::vector<json> ablation_grid(const std::string& name);

struct AblationRow {
  json overrides;
  std::string status;
  double pretrain_loss = 0.0;
  MetricList metrics;
};

/// Runs the pipeline once per override cell under paths.out/cell-NN. A failing
/// cell is recorded with its error and the rest still run. Writes
/// paths.out/ablation.csv with columns cell, override keys, pretrain_loss,
/// stage-2 metrics, status.
std::vector<AblationRow> run_ablation(const RunConfig& base, const std::vector<json>& grid,
                                      std::ostream* log = nullptr);

std::string ablation_csv(const std::vector<AblationRow>& rows, const std::vector<std::string>& metrics);

}  // namespace cotmae
