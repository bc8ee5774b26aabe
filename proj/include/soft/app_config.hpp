#pragma once

// The on-disk run configuration: SoftConfig keys at the top level plus data
// file locations and backend sections. Relative paths resolve against the
// directory holding the config file.
//
//   {
//     "T": 3, "k": 4, "sampling": {...}, "seeds": {...}, ...,
//     "run_dir": "runs/demo",
//     "pool_strict": true,
//     "data": {"prompts": ..., "pool": ..., "principles": ...,
//              "validation_choice": ..., "validation_gen": ...,
//              "refusal_patterns": ...},
//     "backend": {
//       "default": "ngram",
//       "ngram":  {"corpus": ..., "order": 2, "alpha": 0.1},
//       "remote": {"base_url": ..., "initial_model": ..., "record": ..., "replay": ...},
//       "mock":   {"script": ..., "initial_model": "m0"}
//     }
//   }

#include "soft/backend.hpp"
#include "soft/domain.hpp"
#include "soft/pipeline.hpp"
#include "soft/probes.hpp"
#include "soft/remote.hpp"

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace soft {

struct DataPaths {
    std::filesystem::path prompts;
    std::filesystem::path pool;
    std::filesystem::path principles;
    std::filesystem::path validation_choice;
    std::filesystem::path validation_gen;
    std::optional<std::filesystem::path> refusal_patterns;
};

struct AppConfig {
    std::filesystem::path base_dir;
    json raw;
    SoftConfig soft;
    DataPaths data;
    bool pool_strict = true;
    std::optional<std::filesystem::path> run_dir;
    std::string default_backend = "ngram";
    json backends = json::object();

    static AppConfig from_json(const json& doc, const std::filesystem::path& base_dir);
    static AppConfig load(const std::filesystem::path& path);

    /// "name=value" for name in {pool_sampling, segmentation, scoring, sampling}.
    void apply_seed_override(const std::string& assignment);
};

struct LoadedData {
    PromptDataset prompts;
    IclPool pool;
    std::vector<std::string> pool_warnings;
    PrincipleSet principles;
    ValidationSets validation;
};

/// Loads every data file named by the config. The refusal-pattern file, when
/// given, replaces the default matcher for both pool checks and probes.
LoadedData load_data(AppConfig& config);

struct BackendSetup {
    std::unique_ptr<ModelBackend> backend;
    ModelRef initial_model;
    /// Backend section as stored in run.json (credentials removed).
    json provenance;
    /// Set for remote sessions being recorded; saved by the caller.
    std::shared_ptr<RecordingTransport> recorder;
    std::optional<std::filesystem::path> record_path;
};

/// Builds the named backend ("ngram", "remote" or "mock"). The ngram backend
/// trains M_0 from its corpus with every data text added to the vocabulary
/// and stores snapshots under <run_dir>/models when a run directory is given.
BackendSetup make_backend(const AppConfig& config, const std::string& kind, const LoadedData& data,
                          const std::optional<std::filesystem::path>& run_dir);

/// Texts whose tokens the ngram backend adds to its vocabulary.
std::vector<std::string> vocabulary_texts(const LoadedData& data, const ProbeConfig& probes);

}  // namespace soft
