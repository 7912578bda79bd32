#include <math.h>
#include <stdio.h>
#include "nndca.h"

static const char *NET =
    "{\"input_dim\":1,\"output_dim\":1,\"layers\":[]}";

int main(int argc, char **argv) {
    if (argc < 3) return 10;
    NndcaNetwork *net = NULL;
    if (nndca_network_load(argv[1], &net) != NNDCA_STATUS_OK) return 11;

    double lo = -1.0, hi = 1.0, d = 0.0;
    NndcaDomain dom = {&lo, &hi, 1, 0, 0.0};
    NndcaDcaOptions opts = nndca_dca_options_default();
    NndcaSolveResult res;
    if (nndca_dca_solve(net, &dom, &opts, &d, 1, &res) != NNDCA_STATUS_OK) return 12;
    if (res.status != NNDCA_DCA_STATUS_CONVERGED_COMPLEMENTARY || fabs(res.objective) > 1e-9) return 13;

    NndcaNetwork *bad = NULL;
    if (nndca_network_from_json(NET, &bad) == NNDCA_STATUS_OK) return 14;
    if (nndca_last_error() == NULL) return 15;

    NndcaGrid *grid = NULL;
    if (nndca_grid_load(argv[2], &grid) != NNDCA_STATUS_OK) return 16;
    double dc = 0.0, pi[2], charge;
    if (nndca_opf_lmps(grid, &dc, 1, pi, 2, &charge) != NNDCA_STATUS_OK) return 17;
    if (fabs(pi[0] - 15.0) > 1e-6 || fabs(pi[1] - 30.0) > 1e-6) return 18;

    nndca_grid_free(grid);
    nndca_network_free(net);
    printf("ok\n");
    return 0;
}
