# Balanced Geometry Lab
