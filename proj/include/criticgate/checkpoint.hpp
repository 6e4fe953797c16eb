#pragma once

#include <stdexcept>
#include <string>

#include "criticgate/model.hpp"

namespace criticgate {

// Checkpoints are a pair of files: <path>.json (manifest: format version,
// model config, special token ids, tensor index with byte offsets and
// CRC32s) and <path>.bin (raw little-endian float32 tensor blob).

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct CheckpointVersionError : CheckpointError {
    using CheckpointError::CheckpointError;
};
struct CheckpointTruncatedError : CheckpointError {
    using CheckpointError::CheckpointError;
};
struct CheckpointChecksumError : CheckpointError {
    using CheckpointError::CheckpointError;
};

inline constexpr int kCheckpointFormatVersion = 1;

void save_checkpoint(const CriticModel& model, const std::string& path);
CriticModel load_checkpoint(const std::string& path);

}  // namespace criticgate
