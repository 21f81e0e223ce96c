"""Dengue case forecasting from Sentinel-2 image time series."""

from .bands import BandSelection, CorrelationMatrix, SelectionPolicy, correlation_matrix, select_bands
from .csr import (AverageTileBank, CcsThresholds, CloudShadowRemover, NoiseMask, TileGrid, build_average_bank,
                  classify_tiles, detect_ccs, fit_thresholds, swap_tiles)
from .evaluation import SplitSpec, chrono_split, evaluate_repeated, mae, rmse, smape
from .features import GlcmSpec, RadiomicsVector, embed_rgb, extract_texture, first_order_features, glcm_features
from .forecaster import ModelConfig, PredictionSeries, WindowSample, build_windows, make_variant, predict, train
from .ingestion import (AlignedSeries, CaseRecord, EpiWeek, MunicipalityRegion, SatelliteScene, align, fetch_scene,
                        load_cases, resample_to_uniform)

__version__ = "0.1.0"
