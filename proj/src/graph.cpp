#include "corgcn/graph.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace corgcn {

namespace {

[[noreturn]] void io_fail(const std::filesystem::path& path, const std::string& what) {
  throw std::runtime_error(path.string() + ": " + what);
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  for (;;) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  return fields;
}

double parse_double(const std::string& field, const std::filesystem::path& path, std::size_t lineno) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(field, &pos);
    while (pos < field.size() && std::isspace(static_cast<unsigned char>(field[pos]))) ++pos;
    if (pos != field.size()) throw std::invalid_argument("trailing junk");
    return v;
  } catch (const std::exception&) {
    io_fail(path, "line " + std::to_string(lineno) + ": cannot parse number '" + field + "'");
  }
}

bool blank(const std::string& line) {
  return std::all_of(line.begin(), line.end(),
                     [](unsigned char c) { return std::isspace(c); });
}

std::vector<std::vector<double>> read_csv_rows(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) io_fail(path, "cannot open file");
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (blank(line)) continue;
    const auto fields = split_fields(line);
    std::vector<double> row;
    row.reserve(fields.size());
    for (const auto& f : fields) row.push_back(parse_double(f, path, lineno));
    if (!rows.empty() && row.size() != rows.front().size()) {
      io_fail(path, "line " + std::to_string(lineno) + ": ragged row (" +
                        std::to_string(row.size()) + " fields, expected " +
                        std::to_string(rows.front().size()) + ")");
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) io_fail(path, "file has no data rows");
  return rows;
}

std::vector<std::size_t> read_index_array(const nlohmann::json& j, const char* key,
                                          std::size_t n, const std::filesystem::path& path) {
  if (!j.contains(key) || !j[key].is_array()) {
    io_fail(path, std::string("missing integer array '") + key + "'");
  }
  std::vector<std::size_t> out;
  for (const auto& v : j[key]) {
    const long long idx = v.get<long long>();
    if (idx < 0 || static_cast<std::size_t>(idx) >= n) {
      io_fail(path, std::string("index out of range in '") + key + "'");
    }
    out.push_back(static_cast<std::size_t>(idx));
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Graph

bool Graph::has_edge(std::size_t u, std::size_t v) const {
  const auto nb = neighbors(u);
  return std::binary_search(nb.begin(), nb.end(), v);
}

Graph Graph::from_edges(std::size_t n,
                        const std::vector<std::pair<std::size_t, std::size_t>>& edges) {
  std::vector<std::vector<std::size_t>> adj(n);
  for (const auto& [u, v] : edges) {
    if (u >= n || v >= n) throw std::invalid_argument("graph: node index out of range");
    if (u == v) continue;  // self-loops are not stored
    adj[u].push_back(v);
    adj[v].push_back(u);
  }
  Graph g;
  g.n = n;
  g.row_offsets.assign(n + 1, 0);
  for (std::size_t i = 0; i < n; ++i) {
    auto& nb = adj[i];
    std::sort(nb.begin(), nb.end());
    nb.erase(std::unique(nb.begin(), nb.end()), nb.end());
    g.row_offsets[i + 1] = g.row_offsets[i] + nb.size();
  }
  g.columns.reserve(g.row_offsets[n]);
  for (const auto& nb : adj) g.columns.insert(g.columns.end(), nb.begin(), nb.end());
  return g;
}

Graph graph_union(std::span<const Graph> graphs) {
  if (graphs.empty()) throw std::invalid_argument("graph_union: no graphs");
  const std::size_t n = graphs[0].n;
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  for (const auto& g : graphs) {
    if (g.n != n) throw std::invalid_argument("graph_union: node counts disagree");
    for (std::size_t u = 0; u < n; ++u)
      for (std::size_t v : g.neighbors(u))
        if (u < v) edges.emplace_back(u, v);
  }
  return Graph::from_edges(n, edges);
}

// ---------------------------------------------------------------------------
// LabelMatrix

std::vector<std::size_t> LabelMatrix::labeled_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < n; ++i)
    if (labeled[i]) out.push_back(i);
  return out;
}

std::size_t LabelMatrix::positive_count(std::size_t node) const {
  std::size_t c = 0;
  for (std::size_t j = 0; j < k; ++j) c += values[node * k + j];
  return c;
}

// ---------------------------------------------------------------------------
// Dataset IO

Dataset load_dataset(const std::filesystem::path& dir) {
  const auto features_path = dir / "features.csv";
  const auto edges_path = dir / "edges.csv";
  const auto labels_path = dir / "labels.csv";

  const auto feature_rows = read_csv_rows(features_path);
  Dataset data;
  data.features.n = feature_rows.size();
  data.features.f = feature_rows.front().size();
  data.features.values.reserve(data.features.n * data.features.f);
  for (const auto& row : feature_rows) {
    for (double v : row) {
      if (!std::isfinite(v)) io_fail(features_path, "non-finite feature value");
      data.features.values.push_back(v);
    }
  }
  const std::size_t n = data.features.n;

  const auto label_rows = read_csv_rows(labels_path);
  if (label_rows.size() != n) {
    io_fail(labels_path, "row count " + std::to_string(label_rows.size()) +
                             " does not match features (" + std::to_string(n) + ")");
  }
  data.labels.n = n;
  data.labels.k = label_rows.front().size();
  if (data.labels.k < 2) io_fail(labels_path, "need at least 2 label columns");
  data.labels.values.reserve(n * data.labels.k);
  data.labels.labeled.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    bool any = false;
    for (double v : label_rows[i]) {
      if (v != 0.0 && v != 1.0) io_fail(labels_path, "label values must be 0 or 1");
      data.labels.values.push_back(static_cast<std::uint8_t>(v));
      any = any || v == 1.0;
    }
    data.labels.labeled[i] = any ? 1 : 0;
  }

  std::ifstream in(edges_path);
  if (!in) io_fail(edges_path, "cannot open file");
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (blank(line)) continue;
    const auto fields = split_fields(line);
    if (fields.size() != 2) {
      io_fail(edges_path, "line " + std::to_string(lineno) + ": expected 'src,dst'");
    }
    const double src = parse_double(fields[0], edges_path, lineno);
    const double dst = parse_double(fields[1], edges_path, lineno);
    if (src < 0 || dst < 0 || src != std::floor(src) || dst != std::floor(dst) ||
        src >= static_cast<double>(n) || dst >= static_cast<double>(n)) {
      io_fail(edges_path, "line " + std::to_string(lineno) + ": node index out of range");
    }
    edges.emplace_back(static_cast<std::size_t>(src), static_cast<std::size_t>(dst));
  }
  data.graph = Graph::from_edges(n, edges);

  const auto split_path = dir / "split.json";
  if (std::filesystem::exists(split_path)) {
    std::ifstream sin(split_path);
    nlohmann::json j;
    try {
      sin >> j;
    } catch (const std::exception& e) {
      io_fail(split_path, std::string("invalid JSON: ") + e.what());
    }
    Split s;
    s.train = read_index_array(j, "train", n, split_path);
    s.val = read_index_array(j, "val", n, split_path);
    s.test = read_index_array(j, "test", n, split_path);
    data.split = std::move(s);
  }
  return data;
}

void save_dataset(const std::filesystem::path& dir, const Dataset& data) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "features.csv");
    out.precision(17);
    for (std::size_t i = 0; i < data.features.n; ++i) {
      for (std::size_t j = 0; j < data.features.f; ++j) {
        if (j) out << ',';
        out << data.features.values[i * data.features.f + j];
      }
      out << '\n';
    }
  }
  {
    std::ofstream out(dir / "labels.csv");
    for (std::size_t i = 0; i < data.labels.n; ++i) {
      for (std::size_t j = 0; j < data.labels.k; ++j) {
        if (j) out << ',';
        out << static_cast<int>(data.labels.values[i * data.labels.k + j]);
      }
      out << '\n';
    }
  }
  write_edges_csv(dir / "edges.csv", data.graph);
}

void write_edges_csv(const std::filesystem::path& path, const Graph& graph) {
  std::ofstream out(path);
  if (!out) io_fail(path, "cannot open for writing");
  for (std::size_t u = 0; u < graph.n; ++u)
    for (std::size_t v : graph.neighbors(u))
      if (u < v) out << u << ',' << v << '\n';
}

// ---------------------------------------------------------------------------
// Split

Split make_split(const LabelMatrix& labels, std::uint64_t seed) {
  auto idx = labels.labeled_indices();
  const std::size_t n = idx.size();
  const std::size_t n_val = n / 5;
  const std::size_t n_test = n / 5;
  if (n_val == 0 || n_test == 0 || n - n_val - n_test == 0) {
    throw std::invalid_argument("make_split: too few labeled nodes for a 6:2:2 split");
  }
  Rng rng(seed);
  rng.shuffle(idx);
  Split s;
  s.train.assign(idx.begin(), idx.begin() + (n - n_val - n_test));
  s.val.assign(idx.begin() + (n - n_val - n_test), idx.begin() + (n - n_test));
  s.test.assign(idx.begin() + (n - n_test), idx.end());
  return s;
}

// ---------------------------------------------------------------------------
// Adjacency operators

SparseMatrix normalize_adjacency(const Graph& graph) {
  const std::size_t n = graph.n;
  std::vector<double> inv_sqrt_degree(n);
  for (std::size_t i = 0; i < n; ++i) {
    inv_sqrt_degree[i] = 1.0 / std::sqrt(static_cast<double>(graph.degree(i) + 1));
  }
  SparseMatrix m;
  m.n = n;
  m.row_offsets.assign(n + 1, 0);
  for (std::size_t i = 0; i < n; ++i) {
    m.row_offsets[i + 1] = m.row_offsets[i] + graph.degree(i) + 1;  // + self-loop
  }
  m.columns.resize(m.row_offsets[n]);
  m.values.resize(m.row_offsets[n]);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t pos = m.row_offsets[i];
    bool self_written = false;
    for (std::size_t j : graph.neighbors(i)) {
      if (!self_written && j > i) {
        m.columns[pos] = i;
        m.values[pos] = inv_sqrt_degree[i] * inv_sqrt_degree[i];
        ++pos;
        self_written = true;
      }
      m.columns[pos] = j;
      m.values[pos] = inv_sqrt_degree[i] * inv_sqrt_degree[j];
      ++pos;
    }
    if (!self_written) {
      m.columns[pos] = i;
      m.values[pos] = inv_sqrt_degree[i] * inv_sqrt_degree[i];
      ++pos;
    }
  }
  return m;
}

std::vector<double> neighbor_mean(const Graph& graph, std::span<const double> values,
                                  std::size_t dim) {
  if (values.size() != graph.n * dim) {
    throw std::invalid_argument("neighbor_mean: value matrix shape mismatch");
  }
  std::vector<double> out(graph.n * dim);
#pragma omp parallel for schedule(static) if (graph.n * dim > 4096)
  for (long long ii = 0; ii < static_cast<long long>(graph.n); ++ii) {
    const std::size_t i = static_cast<std::size_t>(ii);
    double* row = out.data() + i * dim;
    const double* self = values.data() + i * dim;
    for (std::size_t d = 0; d < dim; ++d) row[d] = self[d];
    for (std::size_t j : graph.neighbors(i)) {
      const double* other = values.data() + j * dim;
      for (std::size_t d = 0; d < dim; ++d) row[d] += other[d];
    }
    const double inv = 1.0 / static_cast<double>(graph.degree(i) + 1);
    for (std::size_t d = 0; d < dim; ++d) row[d] *= inv;
  }
  return out;
}

namespace {

void spmm_values(const SparseMatrix& m, const double* dense, std::size_t dim, double* out) {
#pragma omp parallel for schedule(static) if (m.n * dim > 4096)
  for (long long ii = 0; ii < static_cast<long long>(m.n); ++ii) {
    const std::size_t i = static_cast<std::size_t>(ii);
    double* row = out + i * dim;
    for (std::size_t d = 0; d < dim; ++d) row[d] = 0.0;
    for (std::size_t p = m.row_offsets[i]; p < m.row_offsets[i + 1]; ++p) {
      const double w = m.values[p];
      const double* src = dense + m.columns[p] * dim;
      for (std::size_t d = 0; d < dim; ++d) row[d] += w * src[d];
    }
  }
}

}  // namespace

Tensor spmm(Tape& tape, const SparseMatrix& matrix, const Tensor& dense) {
  if (dense.rows() != matrix.n) throw std::invalid_argument("spmm: row count mismatch");
  const std::size_t dim = dense.cols();
  std::vector<double> values(matrix.n * dim);
  spmm_values(matrix, dense.data().data(), dim, values.data());
  const Tensor inputs[] = {dense};
  // The matrix produced by normalize_adjacency is symmetric, but the backward
  // pass transposes explicitly so any CSR operand is handled correctly.
  return tape.make_result(matrix.n, dim, std::move(values), inputs,
                          [&matrix, dense, dim](const Tensor& out) mutable {
                            if (!dense.requires_grad()) return;
                            auto g = out.grad();
                            auto gx = dense.grad_raw();
                            for (std::size_t i = 0; i < matrix.n; ++i) {
                              for (std::size_t p = matrix.row_offsets[i];
                                   p < matrix.row_offsets[i + 1]; ++p) {
                                const double w = matrix.values[p];
                                const std::size_t j = matrix.columns[p];
                                for (std::size_t d = 0; d < dim; ++d)
                                  gx[j * dim + d] += w * g[i * dim + d];
                              }
                            }
                          });
}

}  // namespace corgcn
