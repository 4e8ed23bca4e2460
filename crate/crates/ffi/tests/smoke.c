#include <math.h>
#include <stdio.h>
#include <string.h>

#include "grass.h"

int main(void) {
    GrassCompressor *c = NULL;
    if (grass_compressor_new("mask:k=64,seed=1+sjlt:k=16,seed=2", 256, &c) != GRASS_STATUS_OK) {
        fprintf(stderr, "new: %s\n", grass_last_error());
        return 1;
    }
    float g[256], out[16];
    for (int i = 0; i < 256; i++) g[i] = (float)(i % 7) - 3.0f;
    if (grass_compressor_output_dim(c) != 16) return 2;
    if (grass_compressor_compress_f32(c, g, 256, out, 16) != GRASS_STATUS_OK) return 3;
    if (grass_compressor_compress_f32(c, g, 255, out, 16) != GRASS_STATUS_DIMENSION_MISMATCH) return 4;
    if (grass_last_error() == NULL || strlen(grass_last_error()) == 0) return 5;
    grass_compressor_free(c);

    GrassCompressor *bad = NULL;
    if (grass_compressor_new("mask:k=10+sjlt:k=20", 100, &bad) != GRASS_STATUS_PARSE) return 6;

    GrassFim *f = NULL;
    if (grass_fim_new(2, &f) != GRASS_STATUS_OK) return 7;
    float a[2] = {1.0f, 0.0f};
    grass_fim_accumulate_f32(f, a, 2);
    if (grass_fim_factorize(f, 1.0) != GRASS_STATUS_OK) return 8;
    double rhs[2] = {2.0, 3.0}, x[2];
    if (grass_fim_ifvp(f, 1.0, rhs, 2, x) != GRASS_STATUS_OK) return 9;
    /* F = e0 e0^T, so (F + I) x = rhs gives x = (1, 3). */
    if (fabs(x[0] - 1.0) > 1e-12 || fabs(x[1] - 3.0) > 1e-12) return 10;
    grass_fim_free(f);
    printf("ok %s\n", grass_version());
    return 0;
}
