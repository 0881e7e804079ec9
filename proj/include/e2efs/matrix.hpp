#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "e2efs/errors.hpp"

namespace e2efs {

// Dense row-major matrix of doubles. Rows are time frames, columns are
// channels/feature bands throughout the library.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> a;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), a(r * c, fill) {}

    double& at(std::size_t r, std::size_t c) { return a[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return a[r * cols + c]; }
    double* row(std::size_t r) { return a.data() + r * cols; }
    const double* row(std::size_t r) const { return a.data() + r * cols; }

    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

    bool all_finite() const {
        for (double v : a)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

// Time x band feature matrix with band descriptors (center frequency in Hz,
// "ratio", or synthetic band names) and the frame rate in Hz.
struct FeatureMatrix {
    Matrix values;
    std::vector<std::string> band_labels;
    double frame_rate = 0.0;

    std::size_t frames() const { return values.rows; }
    std::size_t bands() const { return values.cols; }

    void validate() const {
        if (values.rows < 1) throw DataError("FeatureMatrix: at least one frame required");
        if (band_labels.size() != values.cols)
            throw DataError("FeatureMatrix: band_labels size " + std::to_string(band_labels.size()) +
                            " does not match column count " + std::to_string(values.cols));
        if (!values.all_finite()) throw DataError("FeatureMatrix: non-finite cell");
    }
};

}  // namespace e2efs
