#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "preflab/config.hpp"

namespace preflab {

// Commands: gen-world, pretrain, align, gen-data, train-dpo, train-sft, eval,
// ablate, logit-scan, all. Artifacts land under config.output_dir and the
// manifest is refreshed after every command. Returns a process exit code:
// 0 ok, 2 config, 3 missing artifact, 4 divergence, 5 endpoint failure.
int dispatch(const std::string& command, const RunConfig& config, std::ostream& log, bool quiet = false);

std::vector<std::string> known_commands();

std::string sha256_file(const std::filesystem::path& path);

// Hashes every regular file under dir except manifest.json and
// effective_config.json and writes dir/manifest.json.
void write_manifest(const std::filesystem::path& dir);

}  // namespace preflab
