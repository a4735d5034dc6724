/* Fused float32 GELU kernels: one pass per call instead of a dozen numpy
 * temporaries. erf uses the same rational approximations as the numpy
 * fallback (Cody-style two-region), accurate to float32 resolution.
 * Built on demand by _ckernels.py; everything here is optional.
 */
#include <math.h>
#include <stdint.h>

#define INV_SQRT2   0.70710678118654752440f
#define INV_SQRT2PI 0.39894228040143267794f
#define INV_SQRTPI  0.56418958354775628695f

static inline float erf_f32(float x)
{
    float y = fabsf(x);
    /* |x| <= 0.46875: rational in x^2 */
    float z = x * x;
    float num = 1.85777706184603153e-1f * z;
    float den = z;
    num = (num + 3.16112374387056560e0f) * z;
    den = (den + 2.36012909523441209e1f) * z;
    num = (num + 1.13864154151050156e2f) * z;
    den = (den + 2.44024637934444173e2f) * z;
    num = (num + 3.77485237685302021e2f) * z;
    den = (den + 1.28261652607737228e3f) * z;
    float small = x * (num + 3.20937758913846947e3f) / (den + 2.84423683343917062e3f);

    /* 0.46875 < |x| <= 4: erfc = exp(-y^2) * rational(y); beyond 4, erfc
     * underflows float32 resolution so erf saturates at +-1 */
    float cn = 2.15311535474403846e-8f * y;
    float cd = y;
    cn = (cn + 5.64188496988670089e-1f) * y;
    cd = (cd + 1.57449261107098347e1f) * y;
    cn = (cn + 8.88314979438837594e0f) * y;
    cd = (cd + 1.17693950891312499e2f) * y;
    cn = (cn + 6.61191906371416295e1f) * y;
    cd = (cd + 5.37181101862009858e2f) * y;
    cn = (cn + 2.98635138197400131e2f) * y;
    cd = (cd + 1.62138957456669019e3f) * y;
    cn = (cn + 8.81952221241769090e2f) * y;
    cd = (cd + 3.29079923573345963e3f) * y;
    cn = (cn + 1.71204761263407058e3f) * y;
    cd = (cd + 4.36261909014324716e3f) * y;
    cn = (cn + 2.05107837782607147e3f) * y;
    cd = (cd + 3.43936767414372164e3f) * y;
    float erfc_mid = expf(-y * y) * (cn + 1.23033935479799725e3f)
                     / (cd + 1.23033935480374942e3f);
    float big = (y > 4.0f) ? 1.0f : (1.0f - erfc_mid);
    float signed_v = (x < 0.0f) ? -big : big;
    return (y <= 0.46875f) ? small : signed_v;
}

void mixres_gelu_fwd_f32(const float *x, float *y, int64_t n)
{
    #pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; i++) {
        float v = x[i];
        float cdf = 0.5f * (1.0f + erf_f32(v * INV_SQRT2));
        y[i] = v * cdf;
    }
}

void mixres_gelu_bwd_f32(const float *x, const float *g, float *gx, int64_t n)
{
    #pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < n; i++) {
        float v = x[i];
        float cdf = 0.5f * (1.0f + erf_f32(v * INV_SQRT2));
        float pdf = expf(-0.5f * v * v) * INV_SQRT2PI;
        gx[i] = g[i] * (cdf + v * pdf);
    }
}
