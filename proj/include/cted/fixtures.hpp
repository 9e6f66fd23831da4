#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

namespace cted {

// Regenerates every golden file deterministically from the base seed
// (weights = seed, noise = seed + 1, embeddings = seed + 2).
void dump_fixtures(const std::filesystem::path& out_dir, uint64_t seed = 7);

// FNV-1a over (name, contents) of every regular file, sorted by relative
// path; hex string.
std::string hash_directory(const std::filesystem::path& dir);

}  // namespace cted
