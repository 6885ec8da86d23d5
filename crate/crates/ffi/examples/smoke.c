#include <math.h>
#include <stdio.h>
#include "aicl.h"

static int fail(const char *what) {
    const char *err = aicl_last_error();
    fprintf(stderr, "%s: %s\n", what, err ? err : "(no message)");
    return 1;
}

int main(void) {
    const char *ids[] = {"b", "a", "c"};
    const float data[] = {1.0f, 0.0f, 1.0f, 0.0f, 0.0f, 1.0f};
    AiclIndex *index = NULL;
    if (aicl_index_from_vectors(ids, data, 3, 2, &index) != AICL_STATUS_OK) return fail("index");

    const float query[] = {3.0f, 0.5f};
    AiclNeighborhood *nb = NULL;
    if (aicl_index_top_m(index, query, 2, 2, NULL, &nb) != AICL_STATUS_OK) return fail("top_m");
    for (size_t i = 0; i < aicl_neighborhood_len(nb); i++)
        printf("%s %.6f\n", aicl_neighborhood_id(nb, i), aicl_neighborhood_similarity(nb, i));
    aicl_neighborhood_free(nb);

    if (aicl_index_top_m(index, query, 2, 0, NULL, &nb) != AICL_STATUS_INVALID_ARGUMENT) return 1;
    printf("error: %s\n", aicl_last_error());
    aicl_index_free(index);

    AiclMcNemar r;
    aicl_mcnemar(15, 3, &r);
    printf("mcnemar %.4f %d\n", r.statistic, r.significant);
    printf("version %s\n", aicl_version());
    return 0;
}
