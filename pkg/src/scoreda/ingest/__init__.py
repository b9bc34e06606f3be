from .obsio import read_observation_csv, read_observation_csv_single, write_observation_csv
from .stations import (
    HourlyRecord,
    StationRecord,
    decompose_wind,
    hourly_to_observation_rows,
    interpolate_to_hours,
    read_station_csv,
)
from .synthetic import GRFDataset, SyntheticDatasetSpec, dataset_covariance, generate_grf_dataset, load_dataset, save_dataset
