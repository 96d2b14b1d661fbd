#pragma once

#include <filesystem>
#include <string>

#include "tgar/graph.hpp"
#include "tgar/models.hpp"
#include "tgar/synthetic.hpp"
#include "tgar/trainer.hpp"

namespace tgar {

struct DataConfig {
  std::filesystem::path edges;
  std::filesystem::path features;
  std::filesystem::path labels;
  IngestOptions ingest;
  /// "none" or "citation": generate the dataset instead of reading files.
  std::string synthetic = "none";
  CitationOptions citation;
  bool operator==(const DataConfig&) const = default;
};

/// Everything needed to reproduce a run. The file format has [data], [model],
/// [train] and [run] sections of `key = value` lines; `#` starts a comment.
struct RunConfig {
  DataConfig data;
  /// input_dim and class_count of 0 are filled from the dataset.
  ModelSpec model;
  TrainingConfig train;
  std::filesystem::path out_dir = "run";
  std::filesystem::path clusters_file;
  std::uint64_t partition_seed = 0;
  bool contiguous_partitions = false;
  std::uint64_t louvain_seed = 0;

  std::string serialize() const;
  bool operator==(const RunConfig&) const = default;
};

/// Throws ConfigError naming the line for unknown sections/keys or bad values.
RunConfig parse_config(const std::string& text);
/// Relative data paths are taken relative to the file's directory.
RunConfig load_config(const std::filesystem::path& path);
/// Applies GT_SEED from the environment when set.
void apply_environment(RunConfig& c);

/// Loads or generates the dataset described by `c.data`.
DatasetBundle load_run_data(const RunConfig& c);
/// Fills input_dim / class_count from the dataset when they are 0.
ModelSpec resolve_model(const RunConfig& c, const DatasetBundle& d);

}  // namespace tgar
