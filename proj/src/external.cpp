#include "plequiv/external.hpp"

#include <cerrno>
#include <cmath>
#include <chrono>
#include <csignal>
#include <cstring>
#include <fcntl.h>
#include <istream>
#include <sstream>
#include <stdexcept>
#include <streambuf>
#include <sys/wait.h>
#include <thread>
#include <unistd.h>

#include "plequiv/tensor_io.hpp"

namespace plequiv {
namespace {

// Unbuffered-on-demand reader over a pipe.
class FdInBuf : public std::streambuf {
 public:
  explicit FdInBuf(int fd) : fd_(fd) {}

 protected:
  int_type underflow() override {
    if (gptr() < egptr()) return traits_type::to_int_type(*gptr());
    ssize_t n;
    do {
      n = ::read(fd_, buf_, sizeof(buf_));
    } while (n < 0 && errno == EINTR);
    if (n <= 0) return traits_type::eof();
    setg(buf_, buf_, buf_ + n);
    return traits_type::to_int_type(*gptr());
  }

 private:
  int fd_;
  char buf_[1 << 16];
};

void write_all(int fd, const std::string& bytes) {
  std::size_t done = 0;
  while (done < bytes.size()) {
    const ssize_t n = ::write(fd, bytes.data() + done, bytes.size() - done);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw std::runtime_error(std::string("external model: write failed: ") + std::strerror(errno));
    }
    done += static_cast<std::size_t>(n);
  }
}

std::uint8_t read_u8(std::istream& is) {
  const int c = is.get();
  if (c == std::char_traits<char>::eof()) throw std::runtime_error("unexpected end of stream");
  return static_cast<std::uint8_t>(c);
}

Tensor instance_tensor(const InstanceMap& map) {
  Tensor t(Shape{map.height, map.width});
  for (std::size_t i = 0; i < map.size(); ++i) t[i] = map.ids[i];
  return t;
}

InstanceMap instance_map(const Tensor& t) {
  if (t.rank() != 2) throw std::runtime_error("instances must be H x W, got " + shape_string(t.shape()));
  InstanceMap map(t.dim(0), t.dim(1));
  for (std::size_t i = 0; i < map.size(); ++i) {
    const double v = t[i];
    if (!(v >= 0.0) || v != std::floor(v)) {
      throw std::runtime_error("instance ids must be nonnegative integers");
    }
    map.ids[i] = static_cast<int>(v);
  }
  return map;
}

}  // namespace

void write_request(std::ostream& os, std::span<const Tensor> inputs) {
  write_u32(os, kRequestMagic);
  write_u32(os, static_cast<std::uint32_t>(inputs.size()));
  for (const auto& x : inputs) write_tensor_record(os, {"x", x});
}

std::optional<std::vector<Tensor>> read_request(std::istream& is) {
  if (is.peek() == std::char_traits<char>::eof()) return std::nullopt;
  if (read_u32(is) != kRequestMagic) throw std::runtime_error("bad request magic");
  const std::uint32_t batch = read_u32(is);
  std::vector<Tensor> inputs;
  inputs.reserve(batch);
  for (std::uint32_t i = 0; i < batch; ++i) inputs.push_back(read_tensor_record(is).tensor);
  return inputs;
}

void write_response(std::ostream& os, std::span<const ExternalOutput> outputs) {
  write_u32(os, kResponseMagic);
  write_u32(os, static_cast<std::uint32_t>(outputs.size()));
  for (const auto& out : outputs) {
    write_tensor_record(os, {"seg_probs", out.seg_probs});
    os.put(out.instances ? 1 : 0);
    if (out.instances) write_tensor_record(os, {"instances", instance_tensor(*out.instances)});
  }
}

std::vector<ExternalOutput> read_response(std::istream& is) {
  if (read_u32(is) != kResponseMagic) throw std::runtime_error("bad response magic");
  const std::uint32_t batch = read_u32(is);
  std::vector<ExternalOutput> outputs(batch);
  for (auto& out : outputs) {
    out.seg_probs = read_tensor_record(is).tensor;
    if (out.seg_probs.rank() != 2) {
      throw std::runtime_error("seg_probs must be H x W, got " + shape_string(out.seg_probs.shape()));
    }
    const std::uint8_t has = read_u8(is);
    if (has > 1) throw std::runtime_error("bad has_instances flag");
    if (has == 1) {
      out.instances = instance_map(read_tensor_record(is).tensor);
      if (out.instances->height != out.seg_probs.dim(0) ||
          out.instances->width != out.seg_probs.dim(1)) {
        throw std::runtime_error("instances and seg_probs differ in shape");
      }
    }
  }
  return outputs;
}

InstanceMap connected_components(const std::vector<char>& mask, std::size_t height,
                                 std::size_t width) {
  if (mask.size() != height * width) throw std::invalid_argument("connected_components: bad mask size");
  InstanceMap map(height, width);
  int next = 1;
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < mask.size(); ++start) {
    if (!mask[start] || map.ids[start] != 0) continue;
    map.ids[start] = next;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      const std::size_t r = p / width, c = p % width;
      auto visit = [&](std::size_t q) {
        if (mask[q] && map.ids[q] == 0) {
          map.ids[q] = next;
          stack.push_back(q);
        }
      };
      if (r > 0) visit(p - width);
      if (r + 1 < height) visit(p + width);
      if (c > 0) visit(p - 1);
      if (c + 1 < width) visit(p + 1);
    }
    ++next;
  }
  return map;
}

Prediction to_prediction(const ExternalOutput& out, double threshold) {
  Prediction pred;
  if (out.instances) {
    pred.instances = out.instances->normalized();
    return pred;
  }
  std::vector<char> mask(out.seg_probs.size());
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = out.seg_probs[i] > threshold ? 1 : 0;
  pred.instances = connected_components(mask, out.seg_probs.dim(0), out.seg_probs.dim(1));
  return pred;
}

ExternalModel::ExternalModel(std::string command, double threshold)
    : command_(std::move(command)), threshold_(threshold) {
  if (command_.empty()) throw std::invalid_argument("external model: empty command");
  std::signal(SIGPIPE, SIG_IGN);
}

ExternalModel::~ExternalModel() { shutdown(); }

void ExternalModel::spawn() {
  int in[2], out[2];
  if (::pipe(in) != 0) throw std::runtime_error("external model: pipe failed");
  if (::pipe(out) != 0) {
    ::close(in[0]);
    ::close(in[1]);
    throw std::runtime_error("external model: pipe failed");
  }
  const pid_t pid = ::fork();
  if (pid < 0) {
    for (int fd : {in[0], in[1], out[0], out[1]}) ::close(fd);
    throw std::runtime_error("external model: fork failed");
  }
  if (pid == 0) {
    ::dup2(in[0], STDIN_FILENO);
    ::dup2(out[1], STDOUT_FILENO);
    for (int fd : {in[0], in[1], out[0], out[1]}) ::close(fd);
    ::execl("/bin/sh", "sh", "-c", command_.c_str(), static_cast<char*>(nullptr));
    ::_exit(127);
  }
  ::close(in[0]);
  ::close(out[1]);
  ::fcntl(in[1], F_SETFD, FD_CLOEXEC);
  ::fcntl(out[0], F_SETFD, FD_CLOEXEC);
  pid_ = pid;
  to_child_ = in[1];
  from_child_ = out[0];
  ++spawns_;
}

void ExternalModel::shutdown() {
  if (to_child_ >= 0) ::close(to_child_);
  if (from_child_ >= 0) ::close(from_child_);
  to_child_ = from_child_ = -1;
  if (pid_ <= 0) return;
  int status = 0;
  for (int i = 0; i < 100; ++i) {
    if (::waitpid(pid_, &status, WNOHANG) != 0) {
      pid_ = -1;
      return;
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
  ::kill(pid_, SIGKILL);
  ::waitpid(pid_, &status, 0);
  pid_ = -1;
}

std::vector<Prediction> ExternalModel::evaluate(std::span<const Tensor> inputs) {
  std::lock_guard lock(mutex_);
  if (pid_ <= 0) spawn();
  try {
    std::ostringstream frame;
    write_request(frame, inputs);
    write_all(to_child_, frame.str());
    FdInBuf buf(from_child_);
    std::istream is(&buf);
    const auto outputs = read_response(is);
    if (outputs.size() != inputs.size()) {
      throw std::runtime_error("external model answered " + std::to_string(outputs.size()) +
                               " items for a batch of " + std::to_string(inputs.size()));
    }
    if (is.rdbuf()->in_avail() > 0) throw std::runtime_error("trailing bytes after response");
    std::vector<Prediction> preds;
    preds.reserve(outputs.size());
    for (const auto& o : outputs) preds.push_back(to_prediction(o, threshold_));
    return preds;
  } catch (const std::exception& e) {
    shutdown();
    throw std::runtime_error(std::string("external model '") + command_ + "': " + e.what());
  }
}

Evaluator make_external_evaluator(ExternalModel& model) {
  return [&model](std::span<const Tensor> inputs) { return model.evaluate(inputs); };
}

}  // namespace plequiv
