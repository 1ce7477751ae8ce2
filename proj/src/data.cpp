#include "pstarc/data.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "pstarc/kernels.hpp"

namespace pstarc {

namespace {

using nlohmann::json;

void validate_spec(const DomainSpec& spec) {
    if (spec.class_count < 1) throw ConfigError("domain spec: class_count must be >= 1");
    if (spec.samples_per_class < 1)
        throw ConfigError("domain spec: samples_per_class must be >= 1");
    if (spec.input_dim < 1) throw ConfigError("domain spec: input_dim must be >= 1");
    if (spec.class_means.rows() != spec.class_count || spec.class_means.cols() != spec.input_dim)
        throw ConfigError("domain spec: class_means must be " +
                          std::to_string(spec.class_count) + "x" +
                          std::to_string(spec.input_dim) + ", got " +
                          spec.class_means.shape_str());
    if (spec.class_sigma < 0.0) throw ConfigError("domain spec: class_sigma must be >= 0");
}

// Class-major draw of one sample per (class, index) pair; label marginal is
// exactly uniform by construction.
Dataset draw_blobs(const DomainSpec& spec, Rng& rng) {
    const std::size_t n = spec.class_count * spec.samples_per_class;
    Dataset ds;
    ds.X = Matrix(n, spec.input_dim);
    ds.y.resize(n);
    ds.classes = spec.class_count;
    std::size_t row = 0;
    for (std::size_t c = 0; c < spec.class_count; ++c)
        for (std::size_t s = 0; s < spec.samples_per_class; ++s, ++row) {
            ds.y[row] = static_cast<int>(c);
            for (std::size_t j = 0; j < spec.input_dim; ++j)
                ds.X(row, j) = spec.class_means(c, j) + spec.class_sigma * rng.normal();
        }
    return ds;
}

std::string g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

Dataset make_source_domain(const DomainSpec& spec) {
    validate_spec(spec);
    Rng rng(derive_seed(spec.seed, 0));
    return draw_blobs(spec, rng);
}

Dataset make_shifted_domain(const DomainSpec& spec, const ShiftSpec& shift) {
    validate_spec(spec);
    if (shift.rotation.rows() != spec.input_dim || shift.rotation.cols() != spec.input_dim)
        throw ConfigError("shift: rotation must be " + std::to_string(spec.input_dim) + "x" +
                          std::to_string(spec.input_dim));
    if (!is_orthogonal(shift.rotation))
        throw ConfigError("shift: rotation matrix is not orthogonal (tol 1e-8)");
    if (shift.translation.rows() != 1 || shift.translation.cols() != spec.input_dim)
        throw ConfigError("shift: translation must be 1x" + std::to_string(spec.input_dim));
    if (shift.noise_sigma < 0.0) throw ConfigError("shift: noise_sigma must be >= 0");

    Rng rng(derive_seed(spec.seed, 1));
    Dataset ds = draw_blobs(spec, rng);

    // Row-vector convention: x_t = x_s' * R^T + t + eta.
    Matrix rotated(ds.X.rows(), ds.X.cols());
    kernels::matmul_nt(rotated.data(), ds.X.data(), shift.rotation.data(), ds.X.rows(),
                       ds.X.cols(), shift.rotation.rows());
    for (std::size_t i = 0; i < rotated.rows(); ++i)
        for (std::size_t j = 0; j < rotated.cols(); ++j) {
            double v = rotated(i, j) + shift.translation(0, j);
            if (shift.noise_sigma > 0.0) v += shift.noise_sigma * rng.normal();
            rotated(i, j) = v;
        }
    ds.X = std::move(rotated);
    return ds;
}

Matrix strong_augment(const Matrix& X, AugmentConfig& cfg) {
    if (cfg.dropout < 0.0 || cfg.dropout >= 1.0)
        throw ConfigError("augment: dropout must be in [0, 1)");
    if (cfg.noise_sigma < 0.0) throw ConfigError("augment: noise_sigma must be >= 0");
    Matrix out(X.rows(), X.cols());
    for (std::size_t i = 0; i < X.size(); ++i) {
        const double noisy = X.values()[i] + cfg.noise_sigma * cfg.stream.normal();
        out.values()[i] = cfg.stream.uniform() < cfg.dropout ? 0.0 : noisy;
    }
    return out;
}

BatchStream::BatchStream(const Dataset& ds, std::size_t batch_size, AugmentConfig aug,
                         std::uint64_t seed)
    : ds_(ds), batch_size_(batch_size), aug_(std::move(aug)) {
    if (ds.size() == 0) throw ConfigError("batch_stream: empty dataset");
    if (batch_size < 1) throw ConfigError("batch_stream: batch size must be >= 1");
    order_.resize(ds.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    Rng rng(derive_seed(seed, 2));
    rng.shuffle(order_);
}

std::size_t BatchStream::batch_count() const {
    return (order_.size() + batch_size_ - 1) / batch_size_;
}

std::optional<Batch> BatchStream::next() {
    if (cursor_ >= order_.size()) return std::nullopt;
    const std::size_t take = std::min(batch_size_, order_.size() - cursor_);
    Batch b;
    b.X = Matrix(take, ds_.dim());
    b.y_true.resize(take);
    for (std::size_t i = 0; i < take; ++i) {
        const std::size_t src = order_[cursor_ + i];
        b.y_true[i] = ds_.y[src];
        for (std::size_t j = 0; j < ds_.dim(); ++j) b.X(i, j) = ds_.X(src, j);
    }
    b.X_aug = strong_augment(b.X, aug_);
    cursor_ += take;
    return b;
}

std::string manifest_path_for(const std::string& csv_path) {
    const auto dot = csv_path.rfind('.');
    const auto slash = csv_path.rfind('/');
    if (dot == std::string::npos || (slash != std::string::npos && dot < slash))
        return csv_path + ".json";
    return csv_path.substr(0, dot) + ".json";
}

void save_dataset(const Dataset& ds, const std::string& csv_path,
                  const std::string& manifest_extra_json) {
    std::ofstream out(csv_path);
    if (!out) throw ConfigError("save_dataset: cannot open " + csv_path);
    out << "label";
    for (std::size_t j = 0; j < ds.dim(); ++j) out << ",f" << j;
    out << "\n";
    for (std::size_t i = 0; i < ds.size(); ++i) {
        out << ds.y[i];
        for (std::size_t j = 0; j < ds.dim(); ++j) out << "," << g17(ds.X(i, j));
        out << "\n";
    }
    if (!out) throw ConfigError("save_dataset: write failed for " + csv_path);

    json manifest;
    manifest["dim"] = ds.dim();
    manifest["classes"] = ds.classes;
    manifest["count"] = ds.size();
    json extra = json::parse(manifest_extra_json);
    for (auto& [k, v] : extra.items()) manifest[k] = v;
    std::ofstream mout(manifest_path_for(csv_path));
    mout << manifest.dump(2) << "\n";
}

Dataset load_dataset(const std::string& csv_path) {
    std::ifstream in(csv_path);
    if (!in) throw ParseError("load_dataset: cannot open " + csv_path);
    std::string line;
    if (!std::getline(in, line)) throw ParseError(csv_path + ":1: missing header");
    std::size_t dim = 0;
    {
        std::stringstream ss(line);
        std::string field;
        if (!std::getline(ss, field, ',') || field != "label")
            throw ParseError(csv_path + ":1: header must start with 'label', got '" + field + "'");
        while (std::getline(ss, field, ',')) {
            const std::string want = "f" + std::to_string(dim);
            if (field != want)
                throw ParseError(csv_path + ":1: expected column '" + want + "', got '" + field +
                                 "'");
            ++dim;
        }
        if (dim == 0) throw ParseError(csv_path + ":1: no feature columns");
    }

    std::vector<double> values;
    std::vector<int> labels;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string field;
        std::size_t fieldno = 0;
        if (!std::getline(ss, field, ','))
            throw ParseError(csv_path + ":" + std::to_string(lineno) + ": empty row");
        char* end = nullptr;
        const long lbl = std::strtol(field.c_str(), &end, 10);
        if (end == field.c_str() || *end != '\0' || lbl < 0)
            throw ParseError(csv_path + ":" + std::to_string(lineno) +
                             ": field 0: bad label '" + field + "'");
        labels.push_back(static_cast<int>(lbl));
        while (std::getline(ss, field, ',')) {
            ++fieldno;
            const double v = std::strtod(field.c_str(), &end);
            if (end == field.c_str() || *end != '\0')
                throw ParseError(csv_path + ":" + std::to_string(lineno) + ": field " +
                                 std::to_string(fieldno) + ": bad number '" + field + "'");
            values.push_back(v);
        }
        if (fieldno != dim)
            throw ParseError(csv_path + ":" + std::to_string(lineno) + ": expected " +
                             std::to_string(dim) + " features, got " + std::to_string(fieldno));
    }
    if (labels.empty()) throw ParseError(csv_path + ": no data rows");

    Dataset ds;
    ds.y = std::move(labels);
    ds.X = Matrix(ds.y.size(), dim);
    ds.X.values() = std::move(values);

    // Manifest is authoritative for the class count when present.
    std::ifstream min(manifest_path_for(csv_path));
    if (min) {
        json manifest = json::parse(min, nullptr, false);
        if (!manifest.is_discarded() && manifest.contains("classes"))
            ds.classes = manifest["classes"].get<std::size_t>();
    }
    if (ds.classes == 0) {
        int maxy = 0;
        for (int v : ds.y) maxy = std::max(maxy, v);
        ds.classes = static_cast<std::size_t>(maxy) + 1;
    }
    for (std::size_t i = 0; i < ds.y.size(); ++i)
        if (static_cast<std::size_t>(ds.y[i]) >= ds.classes)
            throw ParseError(csv_path + ": row " + std::to_string(i + 2) + ": label " +
                             std::to_string(ds.y[i]) + " out of range [0," +
                             std::to_string(ds.classes) + ")");
    return ds;
}

Matrix plane_rotation(std::size_t dim, std::size_t axis_a, std::size_t axis_b, double degrees) {
    if (axis_a >= dim || axis_b >= dim || axis_a == axis_b)
        throw ConfigError("plane_rotation: invalid axes");
    Matrix R = Matrix::identity(dim);
    const double rad = degrees * 3.14159265358979323846 / 180.0;
    const double c = std::cos(rad), s = std::sin(rad);
    R(axis_a, axis_a) = c;
    R(axis_a, axis_b) = -s;
    R(axis_b, axis_a) = s;
    R(axis_b, axis_b) = c;
    return R;
}

Matrix random_orthogonal(std::size_t dim, Rng& rng) {
    // Gram-Schmidt on a Gaussian matrix.
    Matrix A = Matrix::random_normal(dim, dim, rng);
    for (std::size_t i = 0; i < dim; ++i) {
        for (std::size_t k = 0; k < i; ++k) {
            const double proj = kernels::active_ops().dot(A.row(i), A.row(k), dim);
            kernels::active_ops().axpy(A.row(i), -proj, A.row(k), dim);
        }
        const double norm = std::sqrt(kernels::active_ops().dot(A.row(i), A.row(i), dim));
        if (norm < 1e-9) return random_orthogonal(dim, rng);  // degenerate draw, retry
        kernels::active_ops().scale(A.row(i), A.row(i), 1.0 / norm, dim);
    }
    return A;
}

bool is_orthogonal(const Matrix& R, double tol) {
    if (R.rows() != R.cols()) return false;
    const std::size_t d = R.rows();
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            double dot = 0.0;
            for (std::size_t k = 0; k < d; ++k) dot += R(k, i) * R(k, j);
            const double want = i == j ? 1.0 : 0.0;
            if (std::abs(dot - want) > tol) return false;
        }
    return true;
}

}  // namespace pstarc
