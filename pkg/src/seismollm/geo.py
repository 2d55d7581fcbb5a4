"""Spherical-Earth geodesy for single-station location."""
from __future__ import annotations

import math

EARTH_RADIUS_KM = 6371.0


def locate_epicenter(station_lat: float, station_lon: float, back_azimuth_deg: float, distance_km: float) -> tuple[float, float]:
    """Walk ``distance_km`` from the station along the back-azimuth.

    Returns ``(lat, lon)`` in degrees, longitude wrapped to [-180, 180).
    """
    if distance_km < 0:
        raise ValueError(f"distance must be non-negative, got {distance_km}")
    if distance_km > math.pi * EARTH_RADIUS_KM:
        raise ValueError(f"distance {distance_km} km exceeds half the Earth's circumference")
    if not -90.0 <= station_lat <= 90.0:
        raise ValueError(f"latitude {station_lat} outside [-90, 90]")
    if distance_km == 0:
        return float(station_lat), float(station_lon)
    phi1 = math.radians(station_lat)
    lam1 = math.radians(station_lon)
    theta = math.radians(back_azimuth_deg)
    delta = distance_km / EARTH_RADIUS_KM
    sin_phi2 = math.sin(phi1) * math.cos(delta) + math.cos(phi1) * math.sin(delta) * math.cos(theta)
    phi2 = math.asin(max(-1.0, min(1.0, sin_phi2)))
    lam2 = lam1 + math.atan2(
        math.sin(theta) * math.sin(delta) * math.cos(phi1),
        math.cos(delta) - math.sin(phi1) * sin_phi2,
    )
    lon = (math.degrees(lam2) + 180.0) % 360.0 - 180.0
    return math.degrees(phi2), lon


def location_error_km(p1: tuple[float, float], p2: tuple[float, float]) -> float:
    """Haversine great-circle distance between two (lat, lon) points."""
    lat1, lon1 = map(math.radians, p1)
    lat2, lon2 = map(math.radians, p2)
    a = math.sin((lat2 - lat1) / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(a)))
