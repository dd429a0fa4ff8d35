#include <math.h>
#include <stdio.h>

#include "rescue_ipw.h"

#define CHECK(cond)                                              \
    do {                                                         \
        if (!(cond)) {                                           \
            fprintf(stderr, "check failed: %s (line %d)\n", #cond, __LINE__); \
            return 1;                                            \
        }                                                        \
    } while (0)

int main(void) {
    RipwDataset *ds = NULL;
    CHECK(ripw_dataset_simulate(1, 1000, 5, false, &ds) == RIPW_STATUS_OK);
    CHECK(ripw_dataset_len(ds) == 1000);

    RipwBalancedOptions opts = ripw_balanced_options_default();
    opts.rho = 0.9;
    RipwSeRequest se = {RIPW_SE_METHOD_INFLUENCE, 0, 1, 1};
    RipwEstimate est;
    CHECK(ripw_estimate_balanced(ds, &opts, &se, &est) == RIPW_STATUS_OK);
    CHECK(est.estimand == RIPW_ESTIMAND_BALANCED);
    CHECK(fabs(est.mu - (est.mu1 - est.mu0)) < 1e-12);
    CHECK(est.se_mu > 0.0 && isnan(est.ci_lower));

    RipwStatus status = ripw_estimate_hypothetical(ds, NULL, &est);
    CHECK(status == RIPW_STATUS_MISSING_L);
    char msg[256];
    CHECK(ripw_last_error_message(msg, sizeof msg) > 0);

    RipwToy toy;
    CHECK(ripw_toy(&toy) == RIPW_STATUS_OK);
    CHECK(toy.policy == 0.0 && toy.hypothetical == 0.2 && toy.principal == 0.5 && toy.balanced == 0.2);

    ripw_dataset_free(ds);
    printf("balanced mu %.6f se %.6f; %s\n", est.mu, est.se_mu, msg);
    return 0;
}
