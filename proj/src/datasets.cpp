#include "floral/datasets.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace floral {

namespace {

// Stream ids, spread out so purposes never collide.
constexpr std::uint64_t kStreamParams = 1;
constexpr std::uint64_t kStreamClientBase = 1000;

void check_common(int clients, int clusters, int r_true, int d_in, int d_out) {
    if (clients < 1 || clusters < 1 || clusters > clients)
        throw ConfigError("task: need 1 <= C <= K");
    if (d_in < 1 || d_out < 1) throw ConfigError("task: dimensions must be >= 1");
    if (r_true < 1 || r_true > std::min(d_in, d_out))
        throw ConfigError("task: r_true must be in [1, min(dims)]");
}

Matrix sample_matrix(int rows, int cols, double stddev, RngStream &rng) {
    Matrix m(rows, cols);
    for (double &x : m.data()) x = stddev * rng.normal();
    return m;
}

Matrix gaussian_inputs(int n, int d, RngStream &rng) {
    Matrix x(n, d);
    for (double &e : x.data()) e = rng.normal();
    return x;
}

Matrix client_targets(const SyntheticTask &task, int cluster, const Matrix &x) {
    Matrix map = task.w_true;
    map.add_scaled(matmul_nt(task.u_true[std::size_t(cluster)], task.v_true[std::size_t(cluster)]),
                   task.family == Family::linear ? task.alpha : 1.0);
    Matrix h = matmul_nt(x, map);
    if (task.family == Family::linear) return h;
    return matmul_nt(relu(h), task.phi_true);
}

}  // namespace

std::vector<double> SyntheticTask::pi_star(int k) const {
    std::vector<double> p(std::size_t(clusters), 0.0);
    p[std::size_t(cluster_of(k))] = 1.0;
    return p;
}

std::vector<int> SyntheticTask::train_counts() const {
    std::vector<int> n;
    n.reserve(splits.size());
    for (const auto &s : splits) n.push_back(s.train_count());
    return n;
}

void sample_client_data(SyntheticTask &task, int train_per_client, int test_per_client) {
    task.splits.clear();
    task.splits.reserve(std::size_t(task.clients));
    for (int k = 0; k < task.clients; ++k) {
        RngStream rng(task.seed, kStreamClientBase + std::uint64_t(k));
        ClientSplit split;
        split.x_train = gaussian_inputs(train_per_client, task.d_x, rng);
        split.x_test = gaussian_inputs(test_per_client, task.d_x, rng);
        const int c = task.cluster_of(k);
        split.y_train = client_targets(task, c, split.x_train);
        split.y_test = client_targets(task, c, split.x_test);
        task.splits.push_back(std::move(split));
    }
}

SyntheticTask gen_linear_task(int clients, int clusters, int d_x, int d_y, int r_true,
                              double alpha, std::uint64_t seed) {
    check_common(clients, clusters, r_true, d_x, d_y);
    SyntheticTask task;
    task.family = Family::linear;
    task.clients = clients;
    task.clusters = clusters;
    task.d_x = d_x;
    task.d_y = d_y;
    task.r_true = r_true;
    task.alpha = alpha;
    task.seed = seed;

    RngStream rng(seed, kStreamParams);
    task.w_true = sample_matrix(d_y, d_x, 1.0 / std::sqrt(double(d_x)), rng);
    for (int c = 0; c < clusters; ++c) {
        task.u_true.push_back(sample_matrix(d_y, r_true, 1.0 / std::sqrt(double(r_true)), rng));
        task.v_true.push_back(sample_matrix(d_x, r_true, 1.0 / std::sqrt(double(d_x)), rng));
    }
    const int n_train = int(std::llround(0.25 * double(d_x) * double(d_y)));
    sample_client_data(task, std::max(1, n_train), kTestSamplesPerClient);
    return task;
}

SyntheticTask gen_mlp_task(int clients, int clusters, int d_x, int d_h, int d_y, int r_true,
                           int width_mult, std::uint64_t seed) {
    check_common(clients, clusters, r_true, d_x, d_h);
    if (d_y < 1) throw ConfigError("task: d_y must be >= 1");
    if (width_mult < 1) throw ConfigError("task: width_mult must be >= 1");
    SyntheticTask task;
    task.family = Family::mlp2;
    task.clients = clients;
    task.clusters = clusters;
    task.d_x = d_x;
    task.d_y = d_y;
    task.d_h = d_h;
    task.r_true = r_true;
    task.width_mult = width_mult;
    task.seed = seed;

    RngStream rng(seed, kStreamParams);
    task.w_true = sample_matrix(d_h, d_x, 1.0 / std::sqrt(double(d_x)), rng);
    task.phi_true = sample_matrix(d_y, d_h, 1.0 / std::sqrt(double(d_h)), rng);
    for (int c = 0; c < clusters; ++c) {
        task.u_true.push_back(sample_matrix(d_h, r_true, 1.0 / std::sqrt(double(r_true)), rng));
        task.v_true.push_back(sample_matrix(d_x, r_true, 1.0 / std::sqrt(double(d_x)), rng));
    }
    const int n_train = int(std::llround(0.5 * double(d_h) * double(d_x)));
    sample_client_data(task, std::max(1, n_train), kTestSamplesPerClient);
    return task;
}

SyntheticTask reduce_data(const SyntheticTask &task, double keep_fraction) {
    if (!(keep_fraction > 0.0) || keep_fraction > 1.0)
        throw ConfigError("reduce_data: keep_fraction must be in (0, 1]");
    SyntheticTask out = task;
    for (auto &split : out.splits) {
        const int n = split.train_count();
        const int keep = std::max(1, int(std::ceil(keep_fraction * double(n))));
        if (keep >= n) continue;
        Matrix x(keep, split.x_train.cols());
        Matrix y(keep, split.y_train.cols());
        for (int i = 0; i < keep; ++i) {
            for (int j = 0; j < x.cols(); ++j) x(i, j) = split.x_train(i, j);
            for (int j = 0; j < y.cols(); ++j) y(i, j) = split.y_train(i, j);
        }
        split.x_train = std::move(x);
        split.y_train = std::move(y);
    }
    return out;
}

namespace {

static_assert(std::endian::native == std::endian::little,
              "task archive assumes little-endian doubles");

constexpr char kMagic[8] = {'F', 'L', 'T', 'A', 'S', 'K', '0', '1'};

void write_i64(std::ostream &os, std::int64_t v) { os.write(reinterpret_cast<const char *>(&v), 8); }
void write_f64(std::ostream &os, double v) { os.write(reinterpret_cast<const char *>(&v), 8); }

std::int64_t read_i64(std::istream &is) {
    std::int64_t v = 0;
    if (!is.read(reinterpret_cast<char *>(&v), 8)) throw ConfigError("task archive truncated");
    return v;
}

double read_f64(std::istream &is) {
    double v = 0;
    if (!is.read(reinterpret_cast<char *>(&v), 8)) throw ConfigError("task archive truncated");
    return v;
}

void write_matrix(std::ostream &os, const Matrix &m) {
    write_i64(os, m.rows());
    write_i64(os, m.cols());
    os.write(reinterpret_cast<const char *>(m.data().data()),
             std::streamsize(m.size() * sizeof(double)));
}

Matrix read_matrix(std::istream &is) {
    const auto rows = read_i64(is), cols = read_i64(is);
    if (rows < 0 || cols < 0 || rows > (1 << 24) || cols > (1 << 24))
        throw ConfigError("task archive: bad matrix dimensions");
    std::vector<double> data(std::size_t(rows) * std::size_t(cols));
    if (!is.read(reinterpret_cast<char *>(data.data()), std::streamsize(data.size() * sizeof(double))))
        throw ConfigError("task archive truncated");
    return Matrix(int(rows), int(cols), std::move(data));
}

}  // namespace

void save_task(const SyntheticTask &task, const std::string &path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ConfigError("cannot open task archive for writing: " + path);
    os.write(kMagic, sizeof kMagic);
    write_i64(os, task.family == Family::linear ? 0 : 1);
    write_i64(os, task.clients);
    write_i64(os, task.clusters);
    write_i64(os, task.d_x);
    write_i64(os, task.d_y);
    write_i64(os, task.d_h);
    write_i64(os, task.r_true);
    write_i64(os, task.width_mult);
    write_f64(os, task.alpha);
    write_i64(os, std::int64_t(task.seed));
    write_matrix(os, task.w_true);
    write_matrix(os, task.phi_true);
    for (int c = 0; c < task.clusters; ++c) {
        write_matrix(os, task.u_true[std::size_t(c)]);
        write_matrix(os, task.v_true[std::size_t(c)]);
    }
    for (const auto &s : task.splits) {
        write_matrix(os, s.x_train);
        write_matrix(os, s.y_train);
        write_matrix(os, s.x_test);
        write_matrix(os, s.y_test);
    }
    if (!os) throw ConfigError("failed writing task archive: " + path);
}

SyntheticTask load_task(const std::string &path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("cannot open task archive: " + path);
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
        throw ConfigError("not a task archive (bad magic/version): " + path);
    SyntheticTask task;
    task.family = read_i64(is) == 0 ? Family::linear : Family::mlp2;
    task.clients = int(read_i64(is));
    task.clusters = int(read_i64(is));
    task.d_x = int(read_i64(is));
    task.d_y = int(read_i64(is));
    task.d_h = int(read_i64(is));
    task.r_true = int(read_i64(is));
    task.width_mult = int(read_i64(is));
    task.alpha = read_f64(is);
    task.seed = std::uint64_t(read_i64(is));
    task.w_true = read_matrix(is);
    task.phi_true = read_matrix(is);
    for (int c = 0; c < task.clusters; ++c) {
        task.u_true.push_back(read_matrix(is));
        task.v_true.push_back(read_matrix(is));
    }
    task.splits.resize(std::size_t(task.clients));
    for (auto &s : task.splits) {
        s.x_train = read_matrix(is);
        s.y_train = read_matrix(is);
        s.x_test = read_matrix(is);
        s.y_test = read_matrix(is);
    }
    return task;
}

}  // namespace floral
