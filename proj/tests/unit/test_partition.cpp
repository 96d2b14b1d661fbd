#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>

#include "tgar/partition.hpp"
#include "tgar/synthetic.hpp"

using namespace tgar;
namespace fs = std::filesystem;

namespace {

Graph undirected(std::size_t n, const std::vector<std::pair<node_id, node_id>>& pairs) {
  std::vector<EdgeInput> e;
  for (auto [a, b] : pairs) {
    e.push_back({a, b, 1});
    e.push_back({b, a, 1});
  }
  return Graph(n, e);
}

Graph path4() { return undirected(4, {{0, 1}, {1, 2}, {2, 3}}); }

// Newman modularity from the dense symmetrized adjacency, written out directly.
double modularity_oracle(const Graph& g, const std::vector<std::uint32_t>& c) {
  const std::size_t n = g.num_nodes();
  std::vector<std::vector<double>> A(n, std::vector<double>(n, 0));
  for (const auto& e : g.edge_list()) {
    A[e.src][e.dst] += e.weight / 2;
    A[e.dst][e.src] += e.weight / 2;
  }
  std::vector<double> k(n, 0);
  double two_m = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      k[i] += A[i][j];
      two_m += A[i][j];
    }
  if (two_m == 0) return 0;
  double q = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (c[i] == c[j]) q += A[i][j] - k[i] * k[j] / two_m;
  return q / two_m;
}

// Every set partition of n nodes as restricted growth strings.
void each_partition(std::size_t n, const std::function<void(const std::vector<std::uint32_t>&)>& fn) {
  std::vector<std::uint32_t> c(n, 0);
  std::function<void(std::size_t, std::uint32_t)> rec = [&](std::size_t i, std::uint32_t used) {
    if (i == n) {
      fn(c);
      return;
    }
    for (std::uint32_t v = 0; v <= used && v < n; ++v) {
      c[i] = v;
      rec(i + 1, std::max(used, v + 1));
    }
  };
  rec(0, 0);
}

std::vector<std::set<node_id>> groups(const ClusterAssignment& a) {
  std::vector<std::set<node_id>> out(a.cluster_count);
  for (node_id v = 0; v < a.cluster_of.size(); ++v) out[a.cluster_of[v]].insert(v);
  std::sort(out.begin(), out.end());
  return out;
}

void check_plan_invariants(const Graph& g, const PartitionPlan& plan) {
  const auto P = plan.partition_count();
  std::size_t lo = g.num_nodes(), hi = 0;
  for (part_id p = 0; p < P; ++p) {
    lo = std::min(lo, plan.master_count(p));
    hi = std::max(hi, plan.master_count(p));
  }
  CHECK(hi - lo <= 1);
  std::vector<int> owner_count(g.num_edges(), 0);
  for (part_id p = 0; p < P; ++p) {
    std::set<node_id> expected_mirrors;
    for (auto e : plan.edges_of(p)) {
      ++owner_count[e];
      CHECK(plan.master_of(g.src(e)) == p);
      if (plan.master_of(g.dst(e)) != p) expected_mirrors.insert(g.dst(e));
    }
    // Brute force: non-masters that are endpoints of an owned edge.
    CHECK(std::vector<node_id>(expected_mirrors.begin(), expected_mirrors.end()) == plan.mirrors_of(p));
    for (std::size_t i = 0; i < plan.local_count(p); ++i)
      CHECK(plan.local_id(p, plan.global_id(p, static_cast<node_id>(i))) == i);
  }
  CHECK(std::all_of(owner_count.begin(), owner_count.end(), [](int c) { return c == 1; }));
}

}  // namespace

TEST_CASE("single partition has no mirrors") {
  const auto g = random_graph({30, 90, 1, 0, false, 2});
  const auto plan = partition_even(g, 1);
  CHECK(plan.mirror_count(0) == 0);
  CHECK(plan.edges_of(0).size() == g.num_edges());
  CHECK(replica_factor(plan, false) == 1.0);
  CHECK(replica_factor(plan, true) == 1.0);
}

TEST_CASE("path 0-1-2-3 in contiguous halves") {
  const auto g = path4();
  const auto plan = partition_even(g, 2, {0, true});
  CHECK(plan.masters_of(0) == std::vector<node_id>{0, 1});
  CHECK(plan.mirrors_of(0) == std::vector<node_id>{2});
  CHECK(plan.mirrors_of(1) == std::vector<node_id>{1});
  for (auto e : plan.edges_of(0)) CHECK(g.src(e) <= 1);
  CHECK(replica_factor(plan, false) == 1.5);
  CHECK(replica_factor(plan, true) == 1.0);
  check_plan_invariants(g, plan);
}

TEST_CASE("64 nodes over 7 partitions") {
  const auto g = random_graph({64, 300, 1, 0, false, 11});
  const auto plan = partition_even(g, 7, {3, false});
  for (part_id p = 0; p < 7; ++p) CHECK((plan.master_count(p) == 9 || plan.master_count(p) == 10));
  check_plan_invariants(g, plan);
}

TEST_CASE("plan invariants on random graphs") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto g = random_graph({10 + seed * 3, 40 + seed * 10, 1, 0, false, seed});
    const std::size_t P = 1 + seed % 6;
    const auto plan = partition_even(g, P, {seed, seed % 2 == 0});
    check_plan_invariants(g, plan);
    std::size_t masters = 0, mirrors = 0;
    for (part_id p = 0; p < P; ++p) {
      masters += plan.master_count(p);
      mirrors += plan.mirror_count(p);
    }
    CHECK(replica_factor(plan, false) ==
          doctest::Approx(static_cast<double>(masters + mirrors) / static_cast<double>(masters)).epsilon(1e-15));
    CHECK(replica_factor(plan, true) == 1.0);
  }
}

TEST_CASE("partition count out of range") {
  const auto g = random_graph({5, 5, 1, 0, false, 0});
  CHECK_THROWS_AS(partition_even(g, 0), RangeError);
  CHECK_THROWS_AS(partition_even(g, 6), RangeError);
}

TEST_CASE("plan file round trip") {
  const auto dir = fs::temp_directory_path() / "tgar_test_plan";
  fs::create_directories(dir);
  const auto g = random_graph({40, 100, 1, 0, false, 4});
  const auto plan = partition_even(g, 3, {9, false});
  write_plan(plan, dir / "plan.txt");
  const auto back = read_plan(g, dir / "plan.txt");
  CHECK(back.master_map() == plan.master_map());
  for (part_id p = 0; p < 3; ++p) CHECK(back.mirrors_of(p) == plan.mirrors_of(p));
  fs::remove_all(dir);
}

TEST_CASE("louvain on two disjoint triangles matches the brute-force optimum") {
  const auto g = undirected(6, {{0, 1}, {1, 2}, {2, 0}, {3, 4}, {4, 5}, {5, 3}});
  double best = -1;
  std::vector<std::uint32_t> arg;
  each_partition(6, [&](const std::vector<std::uint32_t>& c) {
    const double q = modularity_oracle(g, c);
    if (q > best + 1e-12) {
      best = q;
      arg = c;
    }
  });
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto a = cluster_louvain(g, seed);
    CHECK(a.cluster_count == 2);
    CHECK(groups(a) == std::vector<std::set<node_id>>{{0, 1, 2}, {3, 4, 5}});
    CHECK(modularity(g, a.cluster_of) == doctest::Approx(best).epsilon(1e-12));
  }
  CHECK(groups(densify_clusters({arg.begin(), arg.end()})) == std::vector<std::set<node_id>>{{0, 1, 2}, {3, 4, 5}});
}

TEST_CASE("louvain on K4 keeps one cluster, and every split is worse") {
  const auto g = undirected(4, {{0, 1}, {0, 2}, {0, 3}, {1, 2}, {1, 3}, {2, 3}});
  const std::vector<std::uint32_t> one(4, 0);
  each_partition(4, [&](const std::vector<std::uint32_t>& c) {
    if (c != one) CHECK(modularity_oracle(g, c) < modularity_oracle(g, one));
  });
  const auto a = cluster_louvain(g, 1);
  CHECK(a.cluster_count == 1);
}

TEST_CASE("louvain without edges leaves singletons") {
  const Graph g(5, {});
  const auto a = cluster_louvain(g, 0);
  CHECK(a.cluster_count == 5);
}

TEST_CASE("louvain never does worse than singletons") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto g = random_graph({25, 70, 1, 0, true, seed});
    const auto a = cluster_louvain(g, seed);
    std::vector<std::uint32_t> single(g.num_nodes());
    for (node_id v = 0; v < single.size(); ++v) single[v] = v;
    CHECK(modularity(g, a.cluster_of) >= modularity(g, single) - 1e-12);
    CHECK(modularity(g, a.cluster_of) == doctest::Approx(modularity_oracle(g, a.cluster_of)).epsilon(1e-9));
    std::size_t total = 0;
    for (auto s : a.cluster_sizes) total += s;
    CHECK(total == g.num_nodes());
  }
}

TEST_CASE("cluster files") {
  const auto dir = fs::temp_directory_path() / "tgar_test_clusters";
  fs::create_directories(dir);
  SUBCASE("all in one cluster") {
    std::ofstream(dir / "c.txt") << "0 0\n1 0\n2 0\n";
    CHECK(load_clusters(dir / "c.txt", 3).cluster_count == 1);
  }
  SUBCASE("ids 0 and 2 are renumbered with a warning") {
    std::ofstream(dir / "c.txt") << "0 0\n1 2\n2 2\n";
    const auto a = load_clusters(dir / "c.txt", 3);
    CHECK(a.cluster_of == std::vector<std::uint32_t>{0, 1, 1});
    CHECK(!a.warnings.empty());
  }
  SUBCASE("missing node is named") {
    std::ofstream(dir / "c.txt") << "0 0\n1 0\n2 0\n3 1\n4 1\n";
    try {
      load_clusters(dir / "c.txt", 6);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find('5') != std::string::npos);
    }
  }
  SUBCASE("write and read back") {
    const auto g = random_graph({20, 50, 1, 0, false, 1});
    const auto a = cluster_louvain(g, 2);
    write_clusters(a, dir / "c.txt");
    CHECK(load_clusters(dir / "c.txt", 20).cluster_of == a.cluster_of);
  }
  fs::remove_all(dir);
}
