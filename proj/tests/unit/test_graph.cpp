#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "tgar/graph.hpp"
#include "tgar/synthetic.hpp"

using namespace tgar;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("tgar_test_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  fs::path write(const std::string& file, const std::string& text) const {
    std::ofstream(path / file) << text;
    return path / file;
  }
};

void check_index_invariants(const Graph& g) {
  for (const auto* idx : {&g.csr(), &g.csc()}) {
    REQUIRE(idx->offsets.size() == g.num_nodes() + 1);
    CHECK(idx->offsets.front() == 0);
    CHECK(idx->offsets.back() == g.num_edges());
    CHECK(std::is_sorted(idx->offsets.begin(), idx->offsets.end()));
    std::vector<int> seen(g.num_edges(), 0);
    for (auto e : idx->edge_ids) ++seen[e];
    CHECK(std::all_of(seen.begin(), seen.end(), [](int c) { return c == 1; }));
  }
  for (node_id v = 0; v < g.num_nodes(); ++v) {
    for (auto e : g.out_edges(v)) CHECK(g.src(e) == v);
    for (auto e : g.in_edges(v)) CHECK(g.dst(e) == v);
  }
}

}  // namespace

TEST_CASE("empty edge file gives zero offsets") {
  TempDir t("empty");
  const auto d = load_dataset(t.write("e.tsv", "# nothing\n"), t.write("f.tsv", "3 1\n0 1\n1 2\n2 3\n"),
                              t.write("l.tsv", ""));
  CHECK(d.graph.num_nodes() == 3);
  CHECK(d.graph.num_edges() == 0);
  CHECK(d.graph.csr().offsets == std::vector<edge_id>{0, 0, 0, 0});
}

TEST_CASE("triangle symmetrized has six edges and degree two everywhere") {
  TempDir t("tri");
  IngestOptions o;
  o.symmetrize = true;
  const auto d = load_dataset(t.write("e.tsv", "0\t1\n1\t2\n2\t0\n"), t.write("f.tsv", "3 1\n0 0\n1 0\n2 0\n"),
                              t.write("l.tsv", "0 0 train\n1 1 val\n"), o);
  CHECK(d.graph.num_edges() == 6);
  for (node_id v = 0; v < 3; ++v) {
    CHECK(d.graph.out_degree(v) == 2);
    CHECK(d.graph.in_degree(v) == 2);
  }
  CHECK(d.train == std::vector<node_id>{0});
  CHECK(d.validation == std::vector<node_id>{1});
  CHECK(d.labels[2] == -1);
  check_index_invariants(d.graph);
}

TEST_CASE("loader errors") {
  TempDir t("errors");
  const auto f = t.write("f.tsv", "3 1\n0 1\n1 2\n2 3\n");
  const auto l = t.write("l.tsv", "");
  SUBCASE("malformed line names the line") {
    try {
      load_dataset(t.write("e.tsv", "0 1\n# c\n0 x\n"), f, l);
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.line() == 3);
    }
  }
  SUBCASE("node id beyond N") { CHECK_THROWS_AS(load_dataset(t.write("e.tsv", "0 3\n"), f, l), RangeError); }
  SUBCASE("duplicate feature row") {
    CHECK_THROWS_AS(load_dataset(t.write("e.tsv", ""), t.write("g.tsv", "2 1\n0 1\n0 2\n"), l), DuplicateError);
  }
  SUBCASE("overlapping splits") {
    CHECK_THROWS_AS(load_dataset(t.write("e.tsv", ""), f, t.write("m.tsv", "0 0 train\n0 0 test\n")), Error);
  }
}

TEST_CASE("two out-edges from node 0") {
  const std::vector<EdgeInput> edges{{0, 1, 1}, {0, 2, 1}};
  const auto [csr, csc] = build_indices(3, edges);
  CHECK(csr.offsets == std::vector<edge_id>{0, 2, 2, 2});
  CHECK(csr.neighbors == std::vector<node_id>{1, 2});
  CHECK(csc.offsets == std::vector<edge_id>{0, 0, 1, 2});
}

TEST_CASE("self-loop appears in both lists of its node") {
  const Graph g(3, {{1, 1, 1}});
  REQUIRE(g.out_edges(1).size() == 1);
  REQUIRE(g.in_edges(1).size() == 1);
  CHECK(g.out_edges(1)[0] == g.in_edges(1)[0]);
}

TEST_CASE("permuted edge input builds identical indices") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const auto g = random_graph({20, 60, 1, 0, true, static_cast<std::uint64_t>(trial)});
    auto edges = g.edge_list();
    std::shuffle(edges.begin(), edges.end(), rng);
    const Graph h(g.num_nodes(), edges);
    CHECK(h.csr().neighbors == g.csr().neighbors);
    CHECK(h.csr().offsets == g.csr().offsets);
    CHECK(h.csc().neighbors == g.csc().neighbors);
    CHECK(h.csc().offsets == g.csc().offsets);
  }
}

TEST_CASE("csr neighbors match a brute-force adjacency list") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto g = random_graph({15, 50, 1, 0, false, seed});
    check_index_invariants(g);
    std::size_t out_sum = 0, in_sum = 0;
    std::vector<std::multiset<node_id>> out(g.num_nodes()), in(g.num_nodes());
    for (const auto& e : g.edge_list()) {
      out[e.src].insert(e.dst);
      in[e.dst].insert(e.src);
    }
    for (node_id v = 0; v < g.num_nodes(); ++v) {
      out_sum += g.out_degree(v);
      in_sum += g.in_degree(v);
      std::vector<node_id> got(g.csr().neighbors.begin() + g.csr().offsets[v],
                               g.csr().neighbors.begin() + g.csr().offsets[v + 1]);
      CHECK(std::is_sorted(got.begin(), got.end()));
      CHECK(got == std::vector<node_id>(out[v].begin(), out[v].end()));
      std::vector<node_id> got_in(g.csc().neighbors.begin() + g.csc().offsets[v],
                                  g.csc().neighbors.begin() + g.csc().offsets[v + 1]);
      CHECK(got_in == std::vector<node_id>(in[v].begin(), in[v].end()));
    }
    CHECK(out_sum == g.num_edges());
    CHECK(in_sum == g.num_edges());
  }
}

TEST_CASE("edge file round trip") {
  TempDir t("roundtrip");
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto g = random_graph({12, 30, 2, 2, true, seed});
    write_edge_file(g, t.path / "e.tsv");
    write_feature_file(g, t.path / "f.tsv");
    std::ofstream(t.path / "l.tsv").flush();
    const auto d = load_dataset(t.path / "e.tsv", t.path / "f.tsv", t.path / "l.tsv");
    CHECK(d.graph.csr() == g.csr());
    CHECK(d.graph.csc() == g.csc());
    CHECK(std::equal(d.graph.weights().begin(), d.graph.weights().end(), g.weights().begin(), g.weights().end()));
    CHECK(d.graph.node_features() == g.node_features());
    CHECK(d.graph.edge_features() == g.edge_features());
  }
}

TEST_CASE("laplacian edge weights by hand") {
  SUBCASE("unit edge with self-loops added") {
    const Graph g(2, {{0, 1, 1}, {1, 0, 1}});
    CHECK(gcn_edge_weight(g, 0, 1, true) == doctest::Approx(-0.5).epsilon(1e-15));
  }
  SUBCASE("isolated node with only a self-loop") {
    const Graph g(2, {{1, 1, 1}});
    CHECK(gcn_edge_weight(g, 1, 1) == 0);
  }
  SUBCASE("star center to leaf") {
    const Graph g(4, {{0, 1, 1}, {1, 0, 1}, {0, 2, 1}, {2, 0, 1}, {0, 3, 1}, {3, 0, 1}});
    CHECK(gcn_edge_weight(g, 1, 0) == doctest::Approx(-1 / std::sqrt(3.0)).epsilon(1e-15));
  }
  SUBCASE("missing edge") {
    const Graph g(3, {{0, 1, 1}});
    CHECK_THROWS_AS(gcn_edge_weight(g, 1, 2), RangeError);
  }
  SUBCASE("degree-zero endpoint gives zero rather than NaN") {
    const Graph g(3, {{0, 1, 0}});
    const auto w = gcn_weights(g, GcnNorm::laplacian, false);
    CHECK(w.edge[0] == 0);
    CHECK(w.diag[2] == 1);
  }
}
