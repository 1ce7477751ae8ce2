#pragma once

#include <nlohmann/json.hpp>

#include "pstarc/matrix.hpp"

namespace pstarc {

inline nlohmann::json matrix_to_json(const Matrix& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t i = 0; i < m.rows(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (std::size_t j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline Matrix matrix_from_json(const nlohmann::json& j, const char* what) {
    if (!j.is_array() || j.empty() || !j[0].is_array())
        throw ParseError(std::string(what) + ": expected a 2D array");
    const std::size_t rows = j.size();
    const std::size_t cols = j[0].size();
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < rows; ++i) {
        if (!j[i].is_array() || j[i].size() != cols)
            throw ParseError(std::string(what) + ": ragged row " + std::to_string(i));
        for (std::size_t k = 0; k < cols; ++k) {
            if (!j[i][k].is_number())
                throw ParseError(std::string(what) + ": non-numeric entry at (" +
                                 std::to_string(i) + "," + std::to_string(k) + ")");
            m(i, k) = j[i][k].get<double>();
        }
    }
    return m;
}

}  // namespace pstarc
