# Multi-Session Localization
# Long-term visual localization under illumination changes
