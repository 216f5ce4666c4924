#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "picn/tensor.hpp"
#include "picn/training.hpp"

namespace picn {

// Binary layout (all integers little-endian):
//   "PICN" | u32 version | u32 entry count |
//   entries: u32 name length, name bytes, u8 dtype (0 f32, 1 f64), u8 rank,
//            rank x u32 extents, payload |
//   u32 CRC32 of every preceding byte.
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

struct CheckpointEntry {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::vector<std::uint8_t> payload;  // little-endian element bytes
};

template <typename T>
CheckpointEntry make_entry(const std::string& name, const Shape& shape, const T* values);
template <typename T>
std::vector<T> entry_values(const CheckpointEntry& e);

std::vector<std::uint8_t> encode_checkpoint(const std::vector<CheckpointEntry>& entries);
// Validates magic, CRC (before anything else), version and structure.
std::vector<CheckpointEntry> decode_checkpoint(const std::vector<std::uint8_t>& bytes);
void write_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path);

// Model parameters and buffers, the three optimizers' moments and step
// counters, and the completed step count.
std::vector<CheckpointEntry> session_entries(const TrainSession& s);
// Writes into an already constructed session (same config). Every entry the
// session expects must be present exactly once, with matching shape and
// dtype; unknown entries are rejected.
void restore_session(TrainSession& s, const std::vector<CheckpointEntry>& entries);

void save_session(const std::filesystem::path& path, const TrainSession& s);
void load_session(const std::filesystem::path& path, TrainSession& s);

}  // namespace picn
