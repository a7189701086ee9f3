// Reference child for the external-model protocol: seg_probs is input channel 0
// clipped to [0, 1], no instance map.
#include <algorithm>
#include <cstdlib>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "plequiv/external.hpp"

int main(int argc, char** argv) {
  CLI::App app{"echo model for the external evaluator protocol"};
  long crash_after = -1;
  app.add_option("--crash-after", crash_after, "exit abruptly on request K+1");
  CLI11_PARSE(app, argc, argv);

  std::ios::sync_with_stdio(false);
  long served = 0;
  try {
    while (auto inputs = plequiv::read_request(std::cin)) {
      if (crash_after >= 0 && served >= crash_after) std::_Exit(3);
      std::vector<plequiv::ExternalOutput> outputs;
      for (const auto& x : *inputs) {
        if (x.rank() != 3) throw std::runtime_error("expected C x H x W input");
        plequiv::ExternalOutput o;
        o.seg_probs = plequiv::Tensor(plequiv::Shape{x.dim(1), x.dim(2)});
        for (std::size_t i = 0; i < o.seg_probs.size(); ++i) {
          o.seg_probs[i] = std::clamp(x[i], 0.0, 1.0);
        }
        outputs.push_back(std::move(o));
      }
      plequiv::write_response(std::cout, outputs);
      std::cout.flush();
      ++served;
    }
  } catch (const std::exception& e) {
    std::cerr << "echo_model: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
