/* SPDX-License-Identifier: MIT OR Apache-2.0 */

#include <stdio.h>
#include "attnflow.h"

static int fail(int code) {
    const char *msg = atnf_last_error();
    fprintf(stderr, "step %d: %s\n", code, msg ? msg : "(no message)");
    return code;
}

int main(void) {
    AtnfFixture *f = NULL;
    AtnfModel *m = NULL;
    AtnfSession *s = NULL;
    AtnfSegmentation layout;
    uint32_t prompt[64];
    uint32_t out[4];
    size_t len = 0, written = 0;

    if (atnf_fixture_new(true, 2, NULL, 3, 20, 6, &f) != ATNF_STATUS_OK) return fail(1);
    if (atnf_fixture_prompt(f, prompt, 64, &len, &layout) != ATNF_STATUS_OK) return fail(2);
    if (atnf_fixture_model(f, &m) != ATNF_STATUS_OK) return fail(3);
    atnf_fixture_free(f);
    if (atnf_session_new(m, prompt, len, &layout, "llava", &s) != ATNF_STATUS_OK) return fail(4);
    if (atnf_session_generate(s, 4, out, 4, &written) != ATNF_STATUS_OK || written != 4) return fail(5);
    if (atnf_session_step(NULL, out) != ATNF_STATUS_NULL_ARGUMENT) return 6;
    if (atnf_last_error() == NULL) return 7;
    atnf_session_free(s);
    atnf_model_free(m);
    printf("%u %u %u %u\n", out[0], out[1], out[2], out[3]);
    return 0;
}
