// Peak transient memory and time of softmax vs low-rank attention (f32).
#include <cstdio>
#include <cstdlib>

#include "texlora/bench.hpp"

using namespace texlora;

int main(int argc, char** argv) {
  // Optional cap in MiB on tracked allocations; larger cases report "infeasible".
  const std::size_t limit = argc > 1 ? std::strtoull(argv[1], nullptr, 10) << 20 : 0;
  std::vector<bench::BenchSize> sizes;
  for (std::size_t n : {256, 1024, 2048, 4096}) sizes.push_back({n, n, 64, 64});
  sizes.push_back({4096, 4096, 128, 128});
  std::printf("%s\n", bench::bench_csv_header().c_str());
  for (AttentionKernel k : {AttentionKernel::softmax, AttentionKernel::lora})
    for (const auto& r : bench::bench_attention(sizes, k, 3, limit)) std::printf("%s\n", bench::to_csv(r).c_str());
  return 0;
}
