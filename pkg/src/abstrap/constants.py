"""Physical constants in the package's canonical units (ueV, K, GHz, s)."""
import math

K_B_UEV = 86.173303            # ueV / K
H_UEV_PER_GHZ = 4.13566770     # ueV per GHz, i.e. h in ueV*ns
GHZ_PER_UEV = 1.0 / H_UEV_PER_GHZ
H_UEV_S = H_UEV_PER_GHZ * 1e-9
HBAR_UEV_S = H_UEV_S / (2.0 * math.pi)

OMEGA_DEBYE_AL = 2 * math.pi * 15.37e12   # rad/s
OMEGA_DEBYE_SI = 2 * math.pi * 21.98e12   # rad/s
