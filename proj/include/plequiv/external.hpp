#pragma once

#include <cstdint>
#include <iosfwd>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <sys/types.h>
#include <vector>

#include "plequiv/certify.hpp"
#include "plequiv/metrics.hpp"
#include "plequiv/tensor.hpp"

namespace plequiv {

// Child protocol over stdin/stdout, little-endian, tensors as tensor_io records:
//   request:  u32 kRequestMagic, u32 batch, batch x record "x"
//   response: u32 kResponseMagic, u32 batch, batch x (record "seg_probs" (H x W),
//             u8 has_instances, [record "instances" (H x W integer ids)])
inline constexpr std::uint32_t kRequestMagic = 0x52514C50;   // "PLQR"
inline constexpr std::uint32_t kResponseMagic = 0x53514C50;  // "PLQS"

struct ExternalOutput {
  Tensor seg_probs;
  std::optional<InstanceMap> instances;
};

void write_request(std::ostream& os, std::span<const Tensor> inputs);
/// Returns nullopt on a clean end of stream before the frame starts.
std::optional<std::vector<Tensor>> read_request(std::istream& is);
void write_response(std::ostream& os, std::span<const ExternalOutput> outputs);
std::vector<ExternalOutput> read_response(std::istream& is);

/// 4-connected components of `mask` labelled 1..K in row-major order of discovery.
InstanceMap connected_components(const std::vector<char>& mask, std::size_t height,
                                 std::size_t width);

/// Instances as sent, or components of seg_probs > threshold when absent.
Prediction to_prediction(const ExternalOutput& out, double threshold = 0.5);

/// Black-box model in a child process (`/bin/sh -c command`). Calls are
/// serialized. If the child dies or violates the protocol the call throws
/// std::runtime_error and the next call starts a fresh child.
class ExternalModel {
 public:
  explicit ExternalModel(std::string command, double threshold = 0.5);
  ~ExternalModel();
  ExternalModel(const ExternalModel&) = delete;
  ExternalModel& operator=(const ExternalModel&) = delete;

  std::vector<Prediction> evaluate(std::span<const Tensor> inputs);
  /// Number of child processes started so far.
  std::size_t spawn_count() const { return spawns_; }

 private:
  void spawn();
  void shutdown();

  std::string command_;
  double threshold_;
  pid_t pid_ = -1;
  int to_child_ = -1;
  int from_child_ = -1;
  std::size_t spawns_ = 0;
  std::mutex mutex_;
};

/// Evaluator adapter; `model` must outlive the returned function.
Evaluator make_external_evaluator(ExternalModel& model);

}  // namespace plequiv
