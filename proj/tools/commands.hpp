#pragma once

#include "protopart/archive.hpp"
#include "protopart/config.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace protopart::cli {

namespace fs = std::filesystem;

struct TrainOutputs {
    fs::path best_checkpoint;
    fs::path final_checkpoint;
    fs::path log;
    fs::path projection;
    fs::path effective_config;
    double selection_metric = 0.0;
};

/// Loads data, trains, and writes best.ckpt, final.ckpt, training_log.jsonl, projection.json and
/// effective_config.json under cfg.output.dir. `resume` warm-starts from a checkpoint's weights.
TrainOutputs cmd_train(const RunConfig& cfg, const std::optional<fs::path>& resume, std::ostream& status);

struct ExplainOptions {
    fs::path checkpoint;
    std::vector<fs::path> images;
    std::vector<Perturbation> kinds = Perturbation::standard_set();
    fs::path output;
};

/// Per image <output>/<stem>/: prediction.json, one heatmap PNG per prototype, descriptors.json.
/// Returns the bundle directories in input order.
std::vector<fs::path> cmd_explain(const ExplainOptions& opts);

struct EvalOptions {
    fs::path checkpoint;
    std::optional<fs::path> test_manifest;  // default: the test part of the checkpoint's training split
    fs::path output;
    EvaluationConfig evaluation;
    int jobs = 1;
};

/// Writes eval_report.json and embeddings.tsv; returns the report.
ojson cmd_eval(const EvalOptions& opts);

/// Writes one crop per prototype and gallery.json with per-class pairwise distance stats.
ojson cmd_prototypes(const fs::path& checkpoint, const fs::path& output);

/// Generates the synthetic dataset; returns the manifest path.
fs::path cmd_synth(const fs::path& output, int classes, int per_class, int side, std::uint64_t seed);

std::vector<std::string> cmd_validate_manifest(const fs::path& manifest, bool check_files);

/// Training split recorded in a checkpoint (manifest, fraction, seed, input side).
SplitResult checkpoint_split(const CheckpointMeta& meta);

/// Grid cell of patch (w, h) in an image of the given side.
BoundingBox patch_cell(int w, int h, int grid_w, int grid_h, int side);

/// Parses argv and dispatches; maps errors onto exit codes (2 validation, 3 runtime, 4 I/O).
int run(int argc, char** argv, char** envp);

}  // namespace protopart::cli
