#pragma once

#include "protopart/config.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace protopart {

// Archive layout (all integers little-endian):
//   8 bytes  magic "PPCKPT01"
//   u64      metadata length, then that many bytes of UTF-8 JSON
//   u32      array count, then per array:
//            u32 name length, name bytes, u64 rows, u64 cols, rows*cols float64 (row-major, little-endian)
inline constexpr char kArchiveMagic[9] = "PPCKPT01";

struct ArchiveArray {
    std::string name;
    RowMatrix data;
};

struct Archive {
    nlohmann::ordered_json meta = nlohmann::ordered_json::object();
    std::vector<ArchiveArray> arrays;

    const RowMatrix* find(const std::string& name) const noexcept;
};

void write_archive(const std::filesystem::path& path, const Archive& archive);
/// IoError on unreadable or truncated files, ValidationError on a bad magic or malformed metadata.
Archive read_archive(const std::filesystem::path& path);

struct CheckpointMeta {
    int cycle = 0;
    int phase = 0;
    int epoch = 0;
    double selection_metric = 0.0;
    LossReport loss;
    std::string training_digest;
    nlohmann::ordered_json extra = nlohmann::ordered_json::object();  // split info, global descriptors, ...
};

/// Arrays: extractor/<param>, bank/tensors, head/weights, head/bias, whitening/mean, whitening/std.
Archive checkpoint_archive(const Model& model, const CheckpointMeta& meta);
void save_checkpoint(const std::filesystem::path& path, const Model& model, const CheckpointMeta& meta);

struct LoadedCheckpoint {
    Model model;
    CheckpointMeta meta;
};
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);
LoadedCheckpoint checkpoint_from_archive(const Archive& archive);

/// Serves backbone parameters stored as extractor/<name> in an archive.
class ArchiveWeightProvider final : public WeightProvider {
public:
    explicit ArchiveWeightProvider(Archive archive) : archive_(std::move(archive)) {}
    std::optional<RowMatrix> lookup(const std::string& name, int rows, int cols) const override;

private:
    Archive archive_;
};

}  // namespace protopart
