#include "conjlab/types.hpp"

#include <sstream>

namespace conjlab {

TimeWindow::TimeWindow(Time t_min, Time t_max) : TimeWindow(t_min, t_max, t_min) {}

TimeWindow::TimeWindow(Time t_min, Time t_max, Time tau0) : t_min_(t_min), t_max_(t_max), tau0_(tau0)
{
    if (t_max < t_min) throw InvalidArgument("time window is empty");
    if (tau0 < t_min || tau0 > t_max) throw InvalidArgument("tau0 lies outside the time window");
}

void TimeWindow::require(Time t, const char* what) const
{
    if (!contains(t)) {
        std::ostringstream os;
        os << what << ": time " << t << " outside window [" << t_min_ << ", " << t_max_ << "]";
        throw InvalidArgument(os.str());
    }
}

namespace {

std::string singular_message(Time step, double rcond)
{
    std::ostringstream os;
    os << "linear part A(" << step << ") is singular (rcond " << rcond << ")";
    return os.str();
}

std::string contraction_message(const std::string& what, double measured)
{
    std::ostringstream os;
    os << what << ": contraction factor " << measured << " is not below 1";
    return os.str();
}

std::string convergence_message(const std::string& what, std::size_t iterations, double factor, double residual)
{
    std::ostringstream os;
    os << what << ": no convergence after " << iterations << " iterations (factor " << factor << ", residual "
       << residual << ")";
    return os.str();
}

}  // namespace

SingularStep::SingularStep(Time step_, double rcond_)
    : Error(singular_message(step_, rcond_)), step(step_), rcond(rcond_)
{
}

ContractionViolated::ContractionViolated(const std::string& what, double measured_)
    : Error(contraction_message(what, measured_)), measured(measured_)
{
}

NotConverged::NotConverged(const std::string& what, std::size_t iterations_, double factor_, double residual_)
    : Error(convergence_message(what, iterations_, factor_, residual_)),
      iterations(iterations_),
      factor(factor_),
      residual(residual_)
{
}

}  // namespace conjlab
