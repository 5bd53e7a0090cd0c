#pragma once

#include <stdexcept>
#include <string>

namespace fost {

// All library failures derive from Error so callers can catch one type at the
// boundary (the CLI maps them to exit codes).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define FOST_DEFINE_ERROR(Name)            \
  class Name : public Error {              \
   public:                                 \
    using Error::Error;                    \
  }

// tensor_autodiff
FOST_DEFINE_ERROR(ShapeMismatch);
FOST_DEFINE_ERROR(NonScalarLoss);
FOST_DEFINE_ERROR(DetachedGraph);
FOST_DEFINE_ERROR(NonFiniteEvaluation);

// shape_worlds
FOST_DEFINE_ERROR(TooManyClasses);
FOST_DEFINE_ERROR(EmptySplit);

// structnet
FOST_DEFINE_ERROR(UnknownDomain);
FOST_DEFINE_ERROR(NoMapsEnabled);
FOST_DEFINE_ERROR(InvalidConfig);
FOST_DEFINE_ERROR(CheckpointError);

// alignment
FOST_DEFINE_ERROR(DimensionMismatch);
FOST_DEFINE_ERROR(LayerCountMismatch);
FOST_DEFINE_ERROR(LabelOutOfRange);
FOST_DEFINE_ERROR(AlphaOutOfRange);

// pseudo_labeler
FOST_DEFINE_ERROR(ZeroVector);
FOST_DEFINE_ERROR(MissingClass);
FOST_DEFINE_ERROR(DegenerateCenter);
FOST_DEFINE_ERROR(NoEligibleClasses);

// trainer
FOST_DEFINE_ERROR(ProgressOutOfRange);
FOST_DEFINE_ERROR(InsufficientSamples);
FOST_DEFINE_ERROR(NumericalDivergence);
FOST_DEFINE_ERROR(EmptyTestSet);

// harness
FOST_DEFINE_ERROR(IoFailure);
FOST_DEFINE_ERROR(ConfigError);

#undef FOST_DEFINE_ERROR

/// Raised when an estimator term has no contributing samples. The caller is
/// expected to skip the (c1, c2) pair rather than abort.
class NoSamplesForClass : public Error {
 public:
  enum class Side { source, target };
  NoSamplesForClass(int cls, Side side)
      : Error("no " + std::string(side == Side::source ? "source" : "target") +
              " samples for class " + std::to_string(cls)),
        cls_(cls),
        side_(side) {}
  int cls() const noexcept { return cls_; }
  Side side() const noexcept { return side_; }

 private:
  int cls_;
  Side side_;
};

}  // namespace fost
