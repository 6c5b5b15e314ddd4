#pragma once

#include <cmath>
#include <numbers>
#include <string>

#include "detailclip/autograd.hpp"

namespace detailclip {

struct EmaState {
  long step = 0;
  long total_steps = 1;
  double lambda_start = 0.996;
  double lambda = 0.996;
};

/// Cosine ramp of the teacher momentum from lambda_start (step 0) to 1
/// (step == total_steps).
inline double lambda_at(long step, long total_steps, double lambda_start) {
  if (total_steps <= 0 || step < 0 || step > total_steps) {
    throw RangeError("lambda_at: step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + "]");
  }
  if (step == total_steps) return 1.0;
  const double c = std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps));
  return 1.0 - (1.0 - lambda_start) * (c + 1.0) / 2.0;
}

/// teacher <- (1 - lambda) * student + lambda * teacher, element-wise.
template <class T>
void ema_update(Mat<T>& teacher, const Mat<T>& student, double lambda) {
  if (teacher.rows() != student.rows() || teacher.cols() != student.cols()) {
    throw ShapeMismatch("ema_update: teacher " + shape_str(teacher.rows(), teacher.cols()) + " vs student " +
                        shape_str(student.rows(), student.cols()));
  }
  const T l = static_cast<T>(lambda);
  teacher = (T(1) - l) * student + l * teacher;
}

/// Applies ema_update to every array under `teacher_prefix` from the
/// same-named array under `student_prefix`.
template <class T>
void ema_update(ParamStore<T>& params, const std::string& teacher_prefix, const std::string& student_prefix,
                double lambda) {
  for (const auto& name : params.names()) {
    if (name.rfind(teacher_prefix, 0) != 0) continue;
    const std::string source = student_prefix + name.substr(teacher_prefix.size());
    if (!params.contains(source)) throw ShapeMismatch("teacher array " + name + " has no student counterpart");
    ema_update(params.value(name), params.value(source), lambda);
  }
}

}  // namespace detailclip
