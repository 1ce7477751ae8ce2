#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pstarc/matrix.hpp"
#include "pstarc/rng.hpp"

namespace pstarc {

// Domain shift applied on top of the class-conditional generators:
// x_t = R * x_s' + t + noise, with R orthogonal.
struct ShiftSpec {
    Matrix rotation;     // D x D, orthogonal within 1e-8
    Matrix translation;  // 1 x D
    double noise_sigma = 0.0;
};

// Synthetic benchmark description: C isotropic Gaussian blobs in R^D.
struct DomainSpec {
    std::size_t input_dim = 0;
    std::size_t class_count = 0;
    Matrix class_means;  // C x D
    double class_sigma = 1.0;
    std::size_t samples_per_class = 1;
    std::uint64_t seed = 0;
    std::optional<ShiftSpec> shift;  // consumed by make_shifted_domain
};

struct Dataset {
    Matrix X;            // n x D
    std::vector<int> y;  // labels in [0, classes)
    std::size_t classes = 0;

    std::size_t size() const { return y.size(); }
    std::size_t dim() const { return X.cols(); }
};

// Vector-space strong augmentation: additive Gaussian noise followed by
// independent coordinate dropout. Stochastic and label-free; the stream
// advances on every call.
struct AugmentConfig {
    double noise_sigma = 0.0;
    double dropout = 0.0;  // in [0, 1)
    Rng stream{0};

    AugmentConfig() = default;
    AugmentConfig(double sigma, double rho, std::uint64_t seed)
        : noise_sigma(sigma), dropout(rho), stream(seed) {}
};

struct Batch {
    Matrix X;      // B x D
    Matrix X_aug;  // B x D
    // Hidden evaluation labels. Adaptation losses never read these; they are
    // only compared against the reported predictions.
    std::vector<int> y_true;
};

Dataset make_source_domain(const DomainSpec& spec);
Dataset make_shifted_domain(const DomainSpec& spec, const ShiftSpec& shift);

Matrix strong_augment(const Matrix& X, AugmentConfig& cfg);

// One shuffled pass over a dataset, final partial batch included. Each batch
// carries a strong augmentation of its inputs.
class BatchStream {
public:
    BatchStream(const Dataset& ds, std::size_t batch_size, AugmentConfig aug, std::uint64_t seed);

    std::optional<Batch> next();
    std::size_t batch_count() const;
    std::size_t batch_size() const { return batch_size_; }

private:
    const Dataset& ds_;
    std::size_t batch_size_;
    AugmentConfig aug_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
};

// CSV with header `label,f0,...,f{D-1}`, one sample per row, plus a JSON
// manifest next to it (same stem, .json). Round-trip is lossless.
void save_dataset(const Dataset& ds, const std::string& csv_path,
                  const std::string& manifest_extra_json = "{}");
Dataset load_dataset(const std::string& csv_path);

std::string manifest_path_for(const std::string& csv_path);

// Rotation builders for shift construction.
Matrix plane_rotation(std::size_t dim, std::size_t axis_a, std::size_t axis_b, double degrees);
Matrix random_orthogonal(std::size_t dim, Rng& rng);
bool is_orthogonal(const Matrix& R, double tol = 1e-8);

}  // namespace pstarc
