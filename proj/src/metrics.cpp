#include "mote/metrics.hpp"

#include <string>

namespace mote {

double AccuracyMatrix::at(std::size_t i, std::size_t j) const {
    if (i >= rows_.size() || j > i)
        throw ValidationError("accuracy matrix: (" + std::to_string(i) + ", " +
                              std::to_string(j) + ") outside the lower triangle");
    return rows_[i][j];
}

void AccuracyMatrix::push_row(std::vector<double> row) {
    if (row.size() != rows_.size() + 1)
        throw ValidationError("accuracy matrix: row " + std::to_string(rows_.size()) +
                              " needs " + std::to_string(rows_.size() + 1) + " entries, got " +
                              std::to_string(row.size()));
    for (double a : row)
        if (!(a >= 0.0 && a <= 1.0))
            throw ValidationError("accuracy matrix: entry " + std::to_string(a) +
                                  " outside [0, 1]");
    rows_.push_back(std::move(row));
}

double avg_accuracy(const AccuracyMatrix& m, std::size_t stage) {
    if (stage < 1 || stage > m.stages())
        throw ValidationError("avg_accuracy: stage " + std::to_string(stage) +
                              " has no complete row");
    double sum = 0.0;
    for (std::size_t j = 0; j < stage; ++j) sum += m.at(stage - 1, j);
    return sum / static_cast<double>(stage);
}

double avg_forgetting(const AccuracyMatrix& m, std::size_t stage) {
    if (stage < 2)
        throw ValidationError("avg_forgetting: needs at least two stages");
    if (stage > m.stages())
        throw ValidationError("avg_forgetting: stage " + std::to_string(stage) +
                              " has no complete row");
    // f_j = (peak accuracy on task j over earlier stages) - (current accuracy)
    double sum = 0.0;
    for (std::size_t j = 0; j + 1 < stage; ++j) {
        double peak = m.at(j, j);
        for (std::size_t i = j + 1; i + 1 < stage; ++i)
            if (m.at(i, j) > peak) peak = m.at(i, j);
        sum += peak - m.at(stage - 1, j);
    }
    return sum / static_cast<double>(stage - 1);
}

double task_identify_accuracy(const std::vector<std::int32_t>& predicted_tasks,
                              const std::vector<std::int32_t>& true_tasks) {
    if (predicted_tasks.empty())
        throw ValidationError("task_identify_accuracy: no predictions");
    if (predicted_tasks.size() != true_tasks.size())
        throw ValidationError("task_identify_accuracy: length mismatch");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < predicted_tasks.size(); ++i)
        if (predicted_tasks[i] == true_tasks[i]) ++correct;
    return static_cast<double>(correct) / static_cast<double>(predicted_tasks.size());
}

}  // namespace mote
