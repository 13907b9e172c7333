/* compile-and-run driver for generated micro-kernels: correctness against a
 * reference triple loop, then wall-clock GFLOP/s on packed panels.
 *
 * usage: harness mr nr kc reps align
 * exit:  0 ok, 1 relative error above 1e-13, 2 bad configuration
 */
#define _GNU_SOURCE
#include <math.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <time.h>
#ifdef __linux__
#include <sched.h>
#endif

#ifndef KERN_SYM
#define KERN_SYM kernel
#endif

void KERN_SYM(long k, const double *a, const double *b, double *c,
              long rs_c, long cs_c);

static double now_s(void)
{
    struct timespec ts;
    clock_gettime(CLOCK_MONOTONIC, &ts);
    return (double)ts.tv_sec + 1e-9 * (double)ts.tv_nsec;
}

static void reference(long mr, long nr, long k, const double *a,
                      const double *b, double *c)
{
    for (long i = 0; i < mr; i++)
        for (long j = 0; j < nr; j++) {
            double acc = 0.0;
            for (long p = 0; p < k; p++)
                acc += a[i + p * mr] * b[j + p * nr];
            c[i * nr + j] += acc;
        }
}

int main(int argc, char **argv)
{
    if (argc < 6) {
        fprintf(stderr, "usage: %s mr nr kc reps align\n", argv[0]);
        return 2;
    }
    long mr = atol(argv[1]), nr = atol(argv[2]), kc = atol(argv[3]);
    long reps = atol(argv[4]), align = atol(argv[5]);
    if (mr <= 0 || nr <= 0 || kc <= 0 || reps <= 0 ||
        (align != 32 && align != 64)) {
        fprintf(stderr, "bad configuration\n");
        return 2;
    }

#ifdef __linux__
    cpu_set_t set;
    CPU_ZERO(&set);
    CPU_SET(0, &set);
    sched_setaffinity(0, sizeof(set), &set); /* best effort */
#endif

    double *a = aligned_alloc(align, sizeof(double) * (size_t)(mr * kc));
    double *b = aligned_alloc(align, sizeof(double) * (size_t)(kc * nr));
    double *c = aligned_alloc(align, sizeof(double) * (size_t)(mr * nr));
    double *ref = calloc((size_t)(mr * nr), sizeof(double));
    if (!a || !b || !c || !ref) {
        fprintf(stderr, "allocation failed\n");
        return 2;
    }
    srand(42);
    for (long i = 0; i < mr * kc; i++) a[i] = (double)(rand() % 2000 - 1000) / 512.0;
    for (long i = 0; i < kc * nr; i++) b[i] = (double)(rand() % 2000 - 1000) / 512.0;

    /* correctness: one kernel call against the reference */
    memset(c, 0, sizeof(double) * (size_t)(mr * nr));
    KERN_SYM(kc, a, b, c, nr, 1);
    reference(mr, nr, kc, a, b, ref);
    double rel = 0.0;
    for (long i = 0; i < mr * nr; i++) {
        double scale = fabs(ref[i]) > 1.0 ? fabs(ref[i]) : 1.0;
        double d = fabs(c[i] - ref[i]) / scale;
        if (d > rel) rel = d;
    }

    /* warm the caches, then calibrate loop overhead */
    for (int w = 0; w < 8; w++) KERN_SYM(kc, a, b, c, nr, 1);
    volatile long sink = 0;
    double t0 = now_s();
    for (long r = 0; r < reps; r++) sink += r;
    double overhead = now_s() - t0;
    (void)sink;

    /* median of five timed rounds; nothing allocates in here */
    double rounds[5];
    for (int round = 0; round < 5; round++) {
        t0 = now_s();
        for (long r = 0; r < reps; r++)
            KERN_SYM(kc, a, b, c, nr, 1);
        double dt = now_s() - t0 - overhead;
        rounds[round] = dt > 1e-12 ? dt : 1e-12;
    }
    for (int i = 0; i < 5; i++)
        for (int j = i + 1; j < 5; j++)
            if (rounds[j] < rounds[i]) {
                double t = rounds[i];
                rounds[i] = rounds[j];
                rounds[j] = t;
            }
    double seconds = rounds[2];
    double flops = 2.0 * (double)mr * (double)nr * (double)kc * (double)reps;
    double gflops = flops / seconds / 1e9;

    printf("rel_err=%.3e gflops=%.3f seconds=%.6f\n", rel, gflops, seconds);
    free(a); free(b); free(c); free(ref);
    return rel > 1e-13 ? 1 : 0;
}
