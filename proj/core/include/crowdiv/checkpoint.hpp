#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "crowdiv/models.hpp"
#include "crowdiv/nn.hpp"
#include "crowdiv/sim.hpp"

/// Binary checkpoints. Layout (all integers and floats little-endian):
///
///   magic        8 bytes  "CRWDCKPT"
///   version      u32      (kCheckpointVersion)
///   M            u32
///   descriptor   i32 k_frames, n_beams, num_tokens, embed_dim, scan_hidden1,
///                scan_hidden2, head_hidden, disc_hidden; f64 v_max, w_max
///   blocks       u32 count, then per block u32 rows, u32 cols
///   parameters   per block rows*cols f64, row-major
///   config       u64 length + bytes (resolved key = value text)
///   optimizers   4 x { i64 step, f64 lr, beta1, beta2, eps, u64 n, f64 m[n], f64 v[n] }
///                in order policy, value, disc_sa, disc_s
///   rng          u64 length + bytes (textual engine state)
///   update       i64
///   runtime      u8 present; if 1 the world and sensor histories follow
///   trailer      4 bytes "END."
namespace crowdiv::ckpt {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class CheckpointNotFound : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class CorruptCheckpoint : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class VersionMismatch : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class ShapeMismatch : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

/// Trainer state needed to resume collection mid-episode.
struct RuntimeSnapshot {
  sim::World world;
  std::vector<std::vector<std::vector<double>>> histories;  ///< agent x frame x beam
  std::vector<std::uint8_t> recent_outcomes;                ///< 1 = goal, oldest first
};

struct Checkpoint {
  nn::NetworkParams params;
  nn::AdamState adam_policy;
  nn::AdamState adam_value;
  nn::AdamState adam_disc_sa;
  nn::AdamState adam_disc_s;
  std::string config_text;
  std::string rng_state;
  std::int64_t update = 0;
  std::optional<RuntimeSnapshot> runtime;
};

std::vector<std::uint8_t> serialize(const Checkpoint& ckpt);
/// `expected`, when given, must match the stored architecture.
Checkpoint deserialize(std::span<const std::uint8_t> bytes,
                       const nn::NetworkShape* expected = nullptr);

/// Writes to a temporary sibling and renames, so a crash never leaves a
/// half-written file under `path`.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           const nn::NetworkShape* expected = nullptr);

std::string rng_to_string(const sim::Rng& rng);
sim::Rng rng_from_string(const std::string& state);

}  // namespace crowdiv::ckpt
