#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "selftpt/encoders.hpp"
#include "selftpt/pipeline.hpp"
#include "selftpt/synth.hpp"

namespace selftpt {

using Json = nlohmann::json;

// 64-bit FNV-1a. Content addressing for world and checkpoint files: cheap,
// dependency-free, and stable across platforms.
std::uint64_t fnv1a_bytes(std::span<const unsigned char> bytes);
std::string hash_hex(std::uint64_t h);

// Hash of a file's raw bytes, as 16 hex digits. Throws on unreadable paths.
std::string file_hash(const std::string& path);

// On-disk container: an 8-byte little-endian header length, a JSON header,
// then flat little-endian float64 blocks. The header's "blocks" object maps
// block names to {offset (in doubles), rows, cols}. Doubles round-trip
// bit-exactly, so loads reproduce saves losslessly.
class BlockFileWriter {
 public:
  Json& header() { return header_; }
  void add_block(const std::string& name, std::size_t rows, std::size_t cols,
                 std::span<const double> values);
  void save(const std::string& path) const;

 private:
  Json header_ = Json::object();
  std::vector<double> data_;
};

class BlockFile {
 public:
  static BlockFile load(const std::string& path);

  const Json& header() const { return header_; }
  // The named block; throws if missing or if the recorded shape disagrees.
  DiffTensor block(const std::string& name) const;

 private:
  Json header_;
  std::vector<double> data_;
};

// A generated world plus everything needed to rebuild its frozen encoder.
struct WorldFile {
  SyntheticWorld world;
  std::uint64_t encoder_seed = 0;
  EncoderDims dims;
};

void save_world(const WorldFile& wf, const std::string& path);
WorldFile load_world(const std::string& path);

// Trained parameters plus the provenance needed to refuse mismatched
// inputs: the hash of the world file trained on and the manifest that
// produced the run.
struct Checkpoint {
  PromptBank bank;
  ProjectionHead head;
  std::uint64_t encoder_seed = 0;
  EncoderDims dims;
  std::string world_hash;
  std::string manifest_hash;
  Json manifest = Json::object();
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Everything that determines a command's outputs: configuration values,
// input/output paths, and content hashes of the inputs. Hashing the
// canonical dump gives the run identity embedded in artifacts.
struct ExperimentManifest {
  Json values = Json::object();

  void set_input(const std::string& role, const std::string& path);  // records path + hash
  std::string hash() const;
};

// step,epoch,lr,L_ce,L_cpt,L_gm,cos with %.17g fields: parseable and exact.
void write_training_log(const std::string& path, std::span<const StepRow> log);

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

}  // namespace selftpt
