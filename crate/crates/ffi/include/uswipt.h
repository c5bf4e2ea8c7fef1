#ifndef USWIPT_H
#define USWIPT_H

#include <stddef.h>
#include <stdint.h>

/*
 Single-tone transmission mode (`rho = rho_fs`).
 */
#define USW_MODE_SINGLE 0

/*
 Multi-tone transmission mode (`rho = 0`).
 */
#define USW_MODE_MULTI 1

/*
 Power-splitting (DC-coupled) receiver branch.
 */
#define USW_BRANCH_PS 0

/*
 Frequency-splitting (DC-removed) receiver branch.
 */
#define USW_BRANCH_FS 1

typedef enum UswStatus {
  USW_STATUS_OK = 0,
  USW_STATUS_NULL_POINTER = 1,
  USW_STATUS_INVALID_ARGUMENT = 2,
  USW_STATUS_NUMERICAL = 3,
  USW_STATUS_IO = 4,
  USW_STATUS_DATA = 5,
  USW_STATUS_PANIC = 6,
} UswStatus;

/*
 Piecewise-linear energy-harvesting curve for one tone count.
 */
typedef struct UswEhCurve UswEhCurve;

/*
 Link parameters: signal, HPA, receiver and channel.
 */
typedef struct UswScenario UswScenario;

/*
 Trained temporal convolutional network.
 */
typedef struct UswTcn UswTcn;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the last failed call on this thread, or an empty string.

 The pointer stays valid until the next `usw_` call on the same thread.
 */
const char *usw_last_error(void);

/*
 Default link scenario. Release with `usw_scenario_free`.
 */
enum UswStatus usw_scenario_new(struct UswScenario **out);

void usw_scenario_free(struct UswScenario *s);

/*
 HPA drive power in dBm.
 */
enum UswStatus usw_scenario_set_drive_dbm(struct UswScenario *s, double p_dr_dbm);

/*
 Carrier allocation used in single-tone mode, in `[0, 1]`.
 */
enum UswStatus usw_scenario_set_rho_fs(struct UswScenario *s, double rho_fs);

/*
 Receiver noise power of both branches, in dBm.
 */
enum UswStatus usw_scenario_set_noise_dbm(struct UswScenario *s, double sigma_dbm);

/*
 Fading-averaged symbol error rate of a uniformly drawn symbol.
 */
enum UswStatus usw_ser_analytical(const struct UswScenario *s,
                                  uint32_t mode_id,
                                  uintptr_t q,
                                  double *out);

/*
 Symbol error rate at a fixed channel magnitude.
 */
enum UswStatus usw_ser_conditional(const struct UswScenario *s,
                                   uint32_t mode_id,
                                   uintptr_t q,
                                   double h_mag,
                                   double *out);

/*
 Rayleigh-averaged CDF of the branch PAPR estimate of symbol `n` out of `q`.
 */
enum UswStatus usw_papr_cdf(const struct UswScenario *s,
                            uint32_t mode_id,
                            uint32_t branch_id,
                            uintptr_t q,
                            uintptr_t n,
                            double gamma,
                            double *out);

/*
 Fraction of `blocks` correlated fading blocks whose conditional SER exceeds `ser_tag`.
 */
enum UswStatus usw_outage_probability(const struct UswScenario *s,
                                      uint32_t mode_id,
                                      uintptr_t q,
                                      double ser_tag,
                                      uintptr_t blocks,
                                      uint64_t seed,
                                      double *out);

/*
 Marcum Q function of order one half.
 */
enum UswStatus usw_marcum_q_half(double a, double b, double *out);

/*
 Curve through `len` knots `(x[i], y[i])` in watts, starting at output 0.
 */
enum UswStatus usw_eh_curve_new(uintptr_t q,
                                const double *x,
                                const double *y,
                                uintptr_t len,
                                struct UswEhCurve **out);

/*
 Least-squares piecewise-linear fit to measured `(p_in, p_eh)` pairs in watts.
 */
enum UswStatus usw_eh_curve_fit(uintptr_t q,
                                const double *p_in,
                                const double *p_eh,
                                uintptr_t len,
                                uintptr_t segments,
                                struct UswEhCurve **out);

void usw_eh_curve_free(struct UswEhCurve *c);

/*
 Harvested DC power in watts for an RF input of `p_in` watts.
 */
enum UswStatus usw_eh_harvested(const struct UswEhCurve *c, double p_in, double *out);

/*
 Input power in watts where the two curves' conversion efficiencies cross.
 */
enum UswStatus usw_eh_crossover(const struct UswEhCurve *single,
                                const struct UswEhCurve *multi,
                                double *out);

/*
 Load a JSON checkpoint written by `uswipt train-tcn`.
 */
enum UswStatus usw_tcn_load(const char *path, struct UswTcn **out);

void usw_tcn_free(struct UswTcn *m);

/*
 Number of doubles `usw_tcn_predict` expects: window times feature count.
 */
enum UswStatus usw_tcn_input_len(const struct UswTcn *m, uintptr_t *out);

/*
 Prediction at the last step of a time-major window of raw features.
 */
enum UswStatus usw_tcn_predict(const struct UswTcn *m,
                               const double *window,
                               uintptr_t len,
                               double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* USWIPT_H */
