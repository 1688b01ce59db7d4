// Runs acceptance criteria 1-9 and prints one PASS/FAIL line per criterion.
// Optional arguments restrict the run to the listed criterion numbers.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <string>

#include "acceptance.hpp"

namespace acceptance {

bool selected(const Selection& only, int criterion) {
  return only.empty() || std::find(only.begin(), only.end(), criterion) != only.end();
}

}  // namespace acceptance

int main(int argc, char** argv) {
  using namespace acceptance;
  Selection only;
  for (int i = 1; i < argc; ++i) {
    const int c = std::atoi(argv[i]);
    if (c < 1 || c > 9) {
      std::fprintf(stderr, "usage: %s [criterion ...]   (criteria are 1-9)\n", argv[0]);
      return 1;
    }
    only.push_back(c);
  }
  const char* env = std::getenv("ECHOTRACK_CLI");
  const std::string cli = env ? env : ECHOTRACK_CLI;

  std::vector<Verdict> all;
  auto guarded = [&](auto&& run, std::vector<int> ids) {
    try {
      for (auto& v : run()) all.push_back(v);
    } catch (const std::exception& e) {
      for (int id : ids)
        if (selected(only, id)) all.push_back({id, false, std::string("threw: ") + e.what()});
    }
  };
  const auto start = std::chrono::steady_clock::now();
  guarded([&] { return run_f64(only); }, {1, 2, 3, 4, 5, 7});
  guarded([&] { return run_f32(only, cli); }, {6, 8, 9});
  std::sort(all.begin(), all.end(), [](const Verdict& a, const Verdict& b) { return a.criterion < b.criterion; });

  bool ok = true;
  for (const auto& v : all) {
    std::printf("%s criterion %d: %s\n", v.pass ? "PASS" : "FAIL", v.criterion, v.detail.c_str());
    ok = ok && v.pass;
  }
  std::printf("%zu/%zu criteria passed in %.1f s\n",
              static_cast<std::size_t>(std::count_if(all.begin(), all.end(), [](const Verdict& v) { return v.pass; })),
              all.size(), std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
  return ok ? 0 : 1;
}
