#pragma once

#include <cstdint>
#include <vector>

#include "mote/error.hpp"

namespace mote {

// Lower-triangular accuracy record: at(i, j) is the accuracy on task j's
// test set after training through task i, so row i has i + 1 entries.
class AccuracyMatrix {
public:
    std::size_t stages() const { return rows_.size(); }

    double at(std::size_t i, std::size_t j) const;

    // Append the row for the next stage; must have exactly stages() + 1
    // entries, all in [0, 1].
    void push_row(std::vector<double> row);

    const std::vector<std::vector<double>>& rows() const { return rows_; }

    bool operator==(const AccuracyMatrix&) const = default;

private:
    std::vector<std::vector<double>> rows_;
};

// Mean of row `stage` (1-based): accuracy over all tasks seen so far,
// evaluated after that stage.
double avg_accuracy(const AccuracyMatrix& m, std::size_t stage);

// Average forgetting after `stage` (1-based, >= 2): per earlier task, its
// peak past accuracy minus its current accuracy, averaged.
double avg_forgetting(const AccuracyMatrix& m, std::size_t stage);

// Fraction of samples routed to the correct task.
double task_identify_accuracy(const std::vector<std::int32_t>& predicted_tasks,
                              const std::vector<std::int32_t>& true_tasks);

}  // namespace mote
